#pragma once

// Crossformer trunk: dimension-segment-wise embedding, two-stage attention
// encoder with hierarchical segment merging, and a query-driven decoder that
// feeds a pluggable output head.

#include "stiffnet/kan.hpp"
#include "stiffnet/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace stiffnet::model {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using kan::HeadKind;

struct ModelConfig {
  std::size_t in_dims = 3;
  std::size_t out_dims = 2;
  std::size_t seq_len = 500;
  std::size_t seg_len = 20;
  std::size_t d_model = 256;
  std::size_t n_heads = 4;
  std::size_t n_routers = 4;
  std::size_t e_levels = 3;
  std::size_t d_ff = 0;  // 0 selects 2 * d_model
  HeadKind head = HeadKind::kan;
  std::size_t kan_neurons = 5;
  std::size_t kan_grid = 5;
  std::size_t kan_order = 3;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t n_segments() const { return seq_len / seg_len; }
  std::size_t ff_width() const { return d_ff ? d_ff : 2 * d_model; }
  kan::BSplineGrid grid() const { return {-1.0, 1.0, kan_grid, kan_order}; }
  /// Segment count per encoder level (ceil-halving).
  std::vector<std::size_t> level_segments() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Collected diagnostics of one forward pass.
struct ForwardProbe {
  nn::AttentionProbe attention;
  std::vector<Tensor> stage1_outputs;  // per TSA layer, before cross-dimension stage
};

struct DswEmbedding {
  nn::Linear proj;  // seg_len -> d_model, bias-free
  ad::Parameter* pos = nullptr;  // [D, n_seg, d_model]
  std::size_t seg_len = 0;

  DswEmbedding() = default;
  DswEmbedding(nn::ParamStore& store, const std::string& name, std::size_t dims, std::size_t n_seg,
               std::size_t seg_len, std::size_t d_model, Rng& rng);
  /// x [B, D, T] -> [B, D, T/seg_len, d_model]
  Var operator()(Tape& tape, const Var& x) const;
};

struct TwoStageAttention {
  nn::LayerNorm time_norm, time_ff_norm, dim_norm, dim_ff_norm;
  nn::MultiHeadAttention time_attn, dim_sender, dim_receiver;
  nn::FeedForward time_ff, dim_ff;
  ad::Parameter* router = nullptr;  // [n_seg, n_routers, d_model]

  TwoStageAttention() = default;
  TwoStageAttention(nn::ParamStore& store, const std::string& name, std::size_t n_seg, std::size_t d_model,
                    std::size_t n_heads, std::size_t n_routers, std::size_t d_ff, Rng& rng);
  /// h [B, D, S, d] -> same shape
  Var operator()(Tape& tape, const Var& h, ForwardProbe* probe = nullptr) const;
  Var cross_time(Tape& tape, const Var& h, ForwardProbe* probe = nullptr) const;
  Var cross_dimension(Tape& tape, const Var& h, ForwardProbe* probe = nullptr) const;
};

/// Merges adjacent segment pairs: [B, D, S, d] -> [B, D, ceil(S/2), d]. An odd
/// trailing segment passes through unmerged.
struct SegmentMerge {
  nn::LayerNorm norm;
  nn::Linear proj;  // 2d -> d

  SegmentMerge() = default;
  SegmentMerge(nn::ParamStore& store, const std::string& name, std::size_t d_model, Rng& rng);
  Var operator()(Tape& tape, const Var& h) const;
};

struct Encoder {
  std::vector<SegmentMerge> merges;  // one fewer than layers
  std::vector<TwoStageAttention> layers;

  std::vector<Var> operator()(Tape& tape, const Var& embedded, ForwardProbe* probe = nullptr) const;
};

struct DecoderLayer {
  nn::LayerNorm self_norm, cross_norm, ff_norm;
  nn::MultiHeadAttention self_attn, cross_attn;
  nn::FeedForward ff;

  DecoderLayer() = default;
  DecoderLayer(nn::ParamStore& store, const std::string& name, std::size_t d_model, std::size_t n_heads,
               std::size_t d_ff, Rng& rng);
  /// x [(B,) L, d]; memory [B, M, d]
  Var operator()(Tape& tape, const Var& x, const Var& memory, ForwardProbe* probe = nullptr) const;
};

struct Decoder {
  ad::Parameter* queries = nullptr;  // [N, n_out_seg, d]
  std::vector<DecoderLayer> layers;
  nn::LayerNorm final_norm;

  /// One encoder level per layer -> [B, N, n_out_seg, d]
  Var operator()(Tape& tape, const std::vector<Var>& levels, ForwardProbe* probe = nullptr) const;
};

class CrossformerModel {
 public:
  explicit CrossformerModel(const ModelConfig& cfg);
  CrossformerModel(const CrossformerModel&) = delete;
  CrossformerModel& operator=(const CrossformerModel&) = delete;

  /// x [B, in_dims, seq_len] (normalized) -> [B, out_dims, seq_len]
  Var forward(Tape& tape, const Var& x, kan::ClampStats* stats = nullptr, ForwardProbe* probe = nullptr) const;

  /// Gradient-free batch inference.
  Tensor predict(const Tensor& x) const;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  std::size_t parameter_count() const { return params_.count(); }

  const DswEmbedding& embedding() const { return embedding_; }
  const Encoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }
  const kan::OutputHead& head() const { return *head_; }

  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  ModelConfig cfg_;
  nn::ParamStore params_;
  DswEmbedding embedding_;
  Encoder encoder_;
  Decoder decoder_;
  std::unique_ptr<kan::OutputHead> head_;
};

/// Closed-form parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& cfg);

// ---- SCKP checkpoint -----------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

void save_checkpoint(const CrossformerModel& m, const std::filesystem::path& path);
std::unique_ptr<CrossformerModel> load_checkpoint(const std::filesystem::path& path);
/// Reads only the hyperparameter block and the parameter manifest.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);
std::vector<NamedTensor> read_checkpoint_tensors(const std::filesystem::path& path);

}  // namespace stiffnet::model

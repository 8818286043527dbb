#include "cli.hpp"

#include "stiffnet/binary_io.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#ifndef STIFFNET_VERSION
#define STIFFNET_VERSION "0.0.0"
#endif

namespace stiffnet::cli {

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(binary::read_file(path)); }

void Manifest::write(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_path"] = config_path;
  j["resolved_config"] = resolved;
  j["master_seed"] = master_seed;
  j["tool_version"] = STIFFNET_VERSION;
  auto& arts = j["artifacts"] = nlohmann::ordered_json::array();
  for (const auto& a : artifacts) {
    arts.push_back({{"path", a.filename().string()},
                    {"bytes", std::filesystem::file_size(a)},
                    {"sha256", sha256_file(a)}});
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// ---- SVG ---------------------------------------------------------------------------

namespace {

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

std::string render_svg(const std::vector<Panel>& panels, const std::string& x_label, double panel_height) {
  const double width = 900, left = 70, right = 20, top = 28, gap = 46;
  const double plot_w = width - left - right;
  const double height = top + static_cast<double>(panels.size()) * (panel_height + gap) + 10;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  for (std::size_t p = 0; p < panels.size(); ++p) {
    const Panel& panel = panels[p];
    const double y0 = top + static_cast<double>(p) * (panel_height + gap);
    auto ty = [&](double v) { return panel.log_y ? std::log10(std::max(v, 1e-300)) : v; };
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (const auto& s : panel.series) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i]) || (panel.log_y && s.y[i] <= 0)) continue;
        xmin = std::min(xmin, s.x[i]);
        xmax = std::max(xmax, s.x[i]);
        ymin = std::min(ymin, ty(s.y[i]));
        ymax = std::max(ymax, ty(s.y[i]));
      }
    }
    if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1, ymin -= 1;
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * plot_w; };
    auto py = [&](double y) { return y0 + panel_height - (ty(y) - ymin) / (ymax - ymin) * panel_height; };

    os << "<g class=\"panel\" id=\"panel" << p << "\">\n";
    os << "<text x=\"" << left << "\" y=\"" << y0 - 8 << "\" font-weight=\"bold\">" << esc(panel.title) << "</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << y0 << "\" width=\"" << plot_w << "\" height=\"" << panel_height
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      const double yv = ymin + (ymax - ymin) * k / 4.0;
      const double yy = y0 + panel_height - panel_height * k / 4.0;
      os << "<line x1=\"" << left << "\" x2=\"" << left + plot_w << "\" y1=\"" << yy << "\" y2=\"" << yy
         << "\" stroke=\"#ddd\"/>";
      os << "<text x=\"" << left - 6 << "\" y=\"" << yy + 4 << "\" text-anchor=\"end\">"
         << num(panel.log_y ? std::pow(10.0, yv) : yv) << "</text>\n";
      const double xv = xmin + (xmax - xmin) * k / 4.0;
      os << "<text x=\"" << px(xv) << "\" y=\"" << y0 + panel_height + 14 << "\" text-anchor=\"middle\">" << num(xv)
         << "</text>\n";
    }
    double legend_x = left + plot_w - 10;
    for (auto s = panel.series.rbegin(); s != panel.series.rend(); ++s) {
      os << "<text x=\"" << legend_x << "\" y=\"" << y0 + 14 << "\" text-anchor=\"end\" fill=\"" << s->color << "\">"
         << esc(s->label) << "</text>\n";
      legend_x -= 9.0 * static_cast<double>(s->label.size()) + 16;
    }
    for (const auto& s : panel.series) {
      os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.4\""
         << (s.dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i]) || (panel.log_y && s.y[i] <= 0)) continue;
        os << num(px(s.x[i])) << ',' << num(py(s.y[i])) << ' ';
      }
      os << "\"/>\n";
    }
    os << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << y0 + panel_height + 30 << "\" text-anchor=\"middle\">"
       << esc(x_label) << "</text>\n";
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_learning_curve(const train::RunLog& log, const std::filesystem::path& path) {
  Series tr{"train loss", {}, {}, "#1f77b4"}, va{"validation loss", {}, {}, "#d62728", true};
  for (const auto& e : log.epochs) {
    tr.x.push_back(static_cast<double>(e.epoch));
    tr.y.push_back(e.train_loss);
    va.x.push_back(static_cast<double>(e.epoch));
    va.y.push_back(e.val_loss);
  }
  Panel p{"Learning curve (best epoch " + std::to_string(log.best_epoch) + ")", {tr, va}, true};
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << render_svg({p}, "epoch", 320);
}

}  // namespace stiffnet::cli

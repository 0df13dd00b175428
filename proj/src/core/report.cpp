#include "report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

#include "error.hpp"

namespace bfm::report {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<json> read_metrics(const fs::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::IoError, "cannot open metrics log " + path.string());
  std::vector<json> rows;
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      fail(ErrorCode::FormatError, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::optional<double> number(const json& row, const std::string& key) {
  auto it = row.find(key);
  if (it == row.end() || !it->is_number()) return std::nullopt;
  const double v = it->get<double>();
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

}  // namespace

std::string loss_curve_svg(const std::vector<json>& rows, const std::vector<std::string>& keys,
                           const std::string& title) {
  constexpr double W = 640, H = 360, L = 60, R = 150, T = 30, B = 40;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double x = number(rows[i], "step").value_or(static_cast<double>(i));
    for (const auto& k : keys)
      if (auto y = number(rows[i], k)) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, *y);
        ymax = std::max(ymax, *y);
      }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << L << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\""
    << H - T - B << "\" fill=\"none\" stroke=\"#888\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = ymin + (ymax - ymin) * t / 4.0;
    const double x = xmin + (xmax - xmin) * t / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt(y)
      << "</text>\n";
    s << "<text x=\"" << px(x) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
      << fmt(x) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 6 << "\" text-anchor=\"middle\">step</text>\n";
  for (std::size_t k = 0; k < keys.size(); ++k) {
    const char* color = kColors[k % std::size(kColors)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto y = number(rows[i], keys[k]);
      if (!y) continue;
      const double x = number(rows[i], "step").value_or(static_cast<double>(i));
      s << px(x) << ',' << py(*y) << ' ';
    }
    s << "\"/>\n";
    const double ly = T + 14 + 16.0 * k;
    s << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 30
      << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << W - R + 36 << "\" y=\"" << ly << "\">" << keys[k] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string summary_table(const std::vector<json>& rows, const std::vector<std::string>& keys) {
  std::ostringstream s;
  s << "| metric | first | last | min | mean |\n|---|---|---|---|---|\n";
  for (const auto& k : keys) {
    std::vector<double> v;
    for (const auto& r : rows)
      if (auto x = number(r, k)) v.push_back(*x);
    if (v.empty()) {
      s << "| " << k << " | NA | NA | NA | NA |\n";
      continue;
    }
    double sum = 0.0;
    for (double x : v) sum += x;
    s << "| " << k << " | " << fmt(v.front()) << " | " << fmt(v.back()) << " | "
      << fmt(*std::min_element(v.begin(), v.end())) << " | " << fmt(sum / v.size()) << " |\n";
  }
  return s.str();
}

std::vector<fs::path> write_report(const fs::path& metrics, const fs::path& out) {
  const auto rows = read_metrics(metrics);
  fs::create_directories(out);
  std::vector<fs::path> written;
  auto put = [&](const std::string& name, const std::string& body) {
    const fs::path p = out / name;
    std::ofstream f(p, std::ios::trunc);
    if (!f) fail(ErrorCode::IoError, "cannot write " + p.string());
    f << body;
    written.push_back(p);
  };
  put("losses.svg", loss_curve_svg(rows, {"l_total", "l_mae"}, "pretraining loss"));
  put("regularizers.svg", loss_curve_svg(rows, {"l_var", "l_cov"}, "variance / covariance terms"));
  put("lr.svg", loss_curve_svg(rows, {"lr"}, "learning rate"));
  std::ostringstream md;
  md << "# Run summary\n\n" << rows.size() << " logged steps from `" << metrics.filename().string()
     << "`.\n\n"
     << summary_table(rows, {"l_total", "l_mae", "l_var", "l_cov", "grad_norm", "lr"});
  int clipped = 0;
  for (const auto& r : rows)
    if (r.value("clipped", false)) ++clipped;
  md << "\nGradient clipping triggered on " << clipped << " step(s).\n";
  put("summary.md", md.str());
  return written;
}

}  // namespace bfm::report

#include "grc/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "grc/error.hpp"

namespace grc::plot {

namespace {

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = line.find(',', pos);
    out.emplace_back(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.push_back(line);
    pos = end + 1;
  }
  return out;
}

double number(const std::string& s, std::string_view where) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::istringstream is(s);
  is.imbue(std::locale::classic());
  double v = 0.0;
  if (!(is >> v) || !is.eof()) throw IoError(std::string(where) + ": '" + s + "' is not a number");
  return v;
}

std::size_t integer(const std::string& s, std::string_view where) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw IoError(std::string(where) + ": '" + s + "' is not a non-negative integer");
  }
  return std::stoull(s);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

void widen(double& lo, double& hi) {
  if (!(lo < hi)) {
    const double pad = std::abs(lo) > 0 ? std::abs(lo) * 0.1 : 0.5;
    lo -= pad;
    hi += pad;
  }
}

void axes(std::ostringstream& os, const Frame& f, const std::string& title, const std::string& xlabel,
                 const std::string& ylabel) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n"
     << "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n"
     << "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" << title
     << "</text>\n";
  const double xa = f.px(f.x0), xb = f.px(f.x1), ya = f.py(f.y0), yb = f.py(f.y1);
  os << "<line x1=\"" << fmt(xa) << "\" y1=\"" << fmt(ya) << "\" x2=\"" << fmt(xb) << "\" y2=\"" << fmt(ya)
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << fmt(xa) << "\" y1=\"" << fmt(ya) << "\" x2=\"" << fmt(xa) << "\" y2=\"" << fmt(yb)
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << fmt(f.px(xv)) << "\" y=\"" << fmt(ya + 18)
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << label(xv) << "</text>\n";
    os << "<text x=\"" << fmt(xa - 6) << "\" y=\"" << fmt(f.py(yv) + 4)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << label(yv) << "</text>\n";
    os << "<line x1=\"" << fmt(xa) << "\" y1=\"" << fmt(f.py(yv)) << "\" x2=\"" << fmt(xb) << "\" y2=\""
       << fmt(f.py(yv)) << "\" stroke=\"#dddddd\"/>\n";
  }
  os << "<text x=\"320\" y=\"392\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xlabel
     << "</text>\n"
     << "<text x=\"16\" y=\"200\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
        "transform=\"rotate(-90 16 200)\">"
     << ylabel << "</text>\n";
}

}  // namespace

std::vector<MetricsRow> parse_metrics(std::string_view text, std::string_view source) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw IoError(std::string(source) + ":1: missing header");
  const auto header = split_csv(lines[0]);
  if (header.size() < 4 || header[0] != "step" || header[1] != "split" || header[2] != "loss" ||
      header[3] != "accuracy") {
    throw IoError(std::string(source) + ":1: expected header step,split,loss,accuracy,...");
  }
  std::vector<MetricsRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = std::string(source) + ":" + std::to_string(i + 1);
    const auto f = split_csv(lines[i]);
    if (f.size() != header.size()) {
      throw IoError(where + ": expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    }
    MetricsRow r;
    r.step = integer(f[0], where);
    r.split = f[1];
    if (r.split != "train" && r.split != "eval") throw IoError(where + ": unknown split '" + r.split + "'");
    r.loss = number(f[2], where);
    r.accuracy = number(f[3], where);
    for (std::size_t k = 4; k < f.size(); ++k) r.lambda.push_back(number(f[k], where));
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_metrics(text.str(), path.string());
}

std::vector<LambdaPoint> parse_lambda(std::string_view text, std::string_view source) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines[0] != "layer,head,sigma_lambda") {
    throw IoError(std::string(source) + ":1: expected header layer,head,sigma_lambda");
  }
  std::vector<LambdaPoint> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = std::string(source) + ":" + std::to_string(i + 1);
    const auto f = split_csv(lines[i]);
    if (f.size() != 3) throw IoError(where + ": expected 3 fields");
    out.push_back({integer(f[0], where), integer(f[1], where), number(f[2], where)});
  }
  return out;
}

std::string metric_svg(const std::vector<MetricsRow>& rows, const std::string& metric) {
  if (metric != "loss" && metric != "accuracy") throw ConfigError("unknown metric '" + metric + "'");
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& r : rows) {
    const double y = metric == "loss" ? r.loss : r.accuracy;
    if (!std::isfinite(y)) continue;
    const double x = static_cast<double>(r.step);
    series[r.split].emplace_back(x, y);
    if (!any) {
      x0 = x1 = x;
      y0 = y1 = y;
      any = true;
    }
    x0 = std::min(x0, x), x1 = std::max(x1, x);
    y0 = std::min(y0, y), y1 = std::max(y1, y);
  }
  if (metric == "accuracy") y0 = std::min(y0, 0.0), y1 = std::max(y1, 1.0);
  widen(x0, x1);
  widen(y0, y1);
  const Frame f{x0, x1, y0, y1};
  std::ostringstream os;
  axes(os, f, metric, "step", metric);
  const std::map<std::string, std::string> colors{{"train", "#1f77b4"}, {"eval", "#d62728"}};
  int legend = 0;
  for (const auto& [split, pts] : series) {
    const auto it = colors.find(split);
    const std::string color = it == colors.end() ? "#555555" : it->second;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      os << (i ? " " : "") << fmt(f.px(pts[i].first)) << ',' << fmt(f.py(pts[i].second));
    }
    os << "\"/>\n";
    os << "<text x=\"" << 560 << "\" y=\"" << 50 + 16 * legend++ << "\" fill=\"" << color
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << split << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string lambda_svg(const std::vector<LambdaPoint>& points) {
  double x1 = 1;
  for (const auto& p : points) x1 = std::max(x1, static_cast<double>(p.layer) + 1.0);
  const Frame f{-0.5, x1 - 0.5, 0.0, 1.0};
  std::ostringstream os;
  axes(os, f, "sigma(lambda) per head", "layer", "sigma(lambda)");
  os << "<line x1=\"" << fmt(f.px(f.x0)) << "\" y1=\"" << fmt(f.py(0.5)) << "\" x2=\"" << fmt(f.px(f.x1))
     << "\" y2=\"" << fmt(f.py(0.5)) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  std::size_t heads = 1;
  for (const auto& p : points) heads = std::max(heads, p.head + 1);
  for (const auto& p : points) {
    if (!std::isfinite(p.value)) continue;
    const double offset = heads > 1 ? (static_cast<double>(p.head) / static_cast<double>(heads - 1) - 0.5) * 0.4 : 0.0;
    os << "<circle cx=\"" << fmt(f.px(static_cast<double>(p.layer) + offset)) << "\" cy=\"" << fmt(f.py(p.value))
       << "\" r=\"4\" fill=\"#1f77b4\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<LambdaPoint> lambda_from_metrics(const std::vector<MetricsRow>& rows) {
  std::vector<LambdaPoint> out;
  if (rows.empty()) return out;
  const auto& last = rows.back();
  for (std::size_t l = 0; l < last.lambda.size(); ++l) {
    if (std::isfinite(last.lambda[l])) out.push_back({l, 0, last.lambda[l]});
  }
  return out;
}

void write_plots(const std::filesystem::path& metrics, const std::filesystem::path& lambda_csv,
                 const std::filesystem::path& out_dir) {
  const auto rows = read_metrics(metrics);
  std::vector<LambdaPoint> points;
  if (!lambda_csv.empty()) {
    std::ifstream in(lambda_csv, std::ios::binary);
    if (!in) throw IoError("cannot open " + lambda_csv.string());
    std::ostringstream text;
    text << in.rdbuf();
    points = parse_lambda(text.str(), lambda_csv.string());
  } else {
    points = lambda_from_metrics(rows);
  }
  std::filesystem::create_directories(out_dir);
  auto write = [&](const char* name, const std::string& svg) {
    std::ofstream out(out_dir / name, std::ios::binary | std::ios::trunc);
    out << svg;
    if (!out) throw IoError("cannot write " + (out_dir / name).string());
  };
  write("loss.svg", metric_svg(rows, "loss"));
  write("accuracy.svg", metric_svg(rows, "accuracy"));
  write("lambda.svg", lambda_svg(points));
}

}  // namespace grc::plot

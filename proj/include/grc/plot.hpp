#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace grc::plot {

struct MetricsRow {
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> lambda;  // NaN where a layer has no value
};

/// Parses metrics.csv text; malformed rows throw IoError with the line number.
std::vector<MetricsRow> parse_metrics(std::string_view text, std::string_view source = "metrics.csv");
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

struct LambdaPoint {
  std::size_t layer = 0;
  std::size_t head = 0;
  double value = 0.0;
};

/// Parses lambda.csv (layer,head,sigma_lambda).
std::vector<LambdaPoint> parse_lambda(std::string_view text, std::string_view source = "lambda.csv");

/// Line chart of one metric ("loss" or "accuracy") per split; same input
/// gives byte-identical output.
std::string metric_svg(const std::vector<MetricsRow>& rows, const std::string& metric);
/// Scatter of sigma(lambda) against layer with a reference line at 0.5.
std::string lambda_svg(const std::vector<LambdaPoint>& points);
/// Points from the last row of the metrics (one per layer, head = 0).
std::vector<LambdaPoint> lambda_from_metrics(const std::vector<MetricsRow>& rows);

/// Writes loss.svg, accuracy.svg and lambda.svg into out_dir.
void write_plots(const std::filesystem::path& metrics, const std::filesystem::path& lambda_csv,
                 const std::filesystem::path& out_dir);

}  // namespace grc::plot

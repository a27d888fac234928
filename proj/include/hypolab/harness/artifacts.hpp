#pragma once

// Output files with content digests, run manifests and SVG line charts.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hypolab::harness {

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view data);

struct OutputFile {
  std::string name;  // relative to the output directory
  std::string sha256;
  std::size_t bytes = 0;
};

/// Writes files into one directory and remembers their digests in write order.
class OutputSet {
public:
  explicit OutputSet(std::filesystem::path dir);

  const std::filesystem::path& dir() const noexcept { return dir_; }
  void write(const std::string& name, const std::string& content);
  const std::vector<OutputFile>& files() const noexcept { return files_; }

private:
  std::filesystem::path dir_;
  std::vector<OutputFile> files_;
};

struct ManifestInfo {
  std::string tool_version;
  std::string subcommand;
  std::string config_hash;
  std::uint64_t seed = 0;
  double wall_time_s = 0.0;
  int exit_code = 0;
};

/// manifest.json listing every file of `outputs`; not itself listed.
void write_manifest(const OutputSet& outputs, const ManifestInfo& info);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  bool log_x = false;
  bool log_y = false;
};

/// Polyline chart. Non-finite points, and non-positive ones on log axes, are
/// skipped.
std::string svg_line_chart(const ChartSpec& spec);

}  // namespace hypolab::harness

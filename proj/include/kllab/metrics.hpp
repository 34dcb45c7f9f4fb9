#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "kllab/dataset.hpp"

namespace kllab {

// Append-only newline-delimited JSON records. Numbers are printed by
// nlohmann::json (shortest round-trip form), so identical values give
// identical bytes.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& path, bool truncate = true) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    os_.open(path, truncate ? std::ios::trunc : std::ios::app);
    if (!os_) throw IoError("cannot open metrics file", path);
  }

  bool is_open() const { return os_.is_open(); }

  void write(const nlohmann::json& record) {
    if (!os_.is_open()) return;
    os_ << record.dump() << '\n';
    os_.flush();
    if (!os_) throw IoError("metrics write failed", path_);
  }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
};

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open", path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing", path);
  os << j.dump(2) << '\n';
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing", path);
  os << text;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open", path);
  return nlohmann::json::parse(is);
}

}  // namespace kllab

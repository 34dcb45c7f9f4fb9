#pragma once

// Balanced scratchpad datasets stored as newline-delimited JSON records
// ({"a","b","prompt","text"}) with a JSON manifest next to them.

#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kllab/rng.hpp"
#include "kllab/scratchpad.hpp"

namespace kllab {

struct DatasetSpec {
  int n_max = 3;
  std::size_t n_examples = 0;
  std::uint64_t seed = 0;
  std::string split = "train";
};

struct DatasetRecord {
  AdditionProblem problem;
  std::string prompt;
  std::string text;
};

struct DatasetManifest {
  DatasetSpec spec;
  std::map<std::string, std::size_t> class_counts;  // "len_a,len_b" -> count
};

class IoError : public std::runtime_error {
 public:
  IoError(const std::string& what, std::filesystem::path path)
      : std::runtime_error(what + ": " + path.string()), path_(std::move(path)) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string class_key(std::size_t len_a, std::size_t len_b) {
  return std::to_string(len_a) + "," + std::to_string(len_b);
}

inline std::filesystem::path manifest_path_for(const std::filesystem::path& dataset) {
  auto p = dataset;
  p += ".manifest.json";
  return p;
}

// Examples cycle through the n_max^2 length classes so class counts differ by
// at most one, then the order is shuffled. Everything derives from spec.seed.
inline std::vector<AdditionProblem> generate_problems(const DatasetSpec& spec) {
  if (spec.n_max < 1) throw std::invalid_argument("n_max must be >= 1");
  Rng rng(derive_seed(spec.seed, "dataset:" + spec.split));
  const std::size_t n_classes = static_cast<std::size_t>(spec.n_max) * spec.n_max;
  std::vector<AdditionProblem> out;
  out.reserve(spec.n_examples);
  for (std::size_t i = 0; i < spec.n_examples; ++i) {
    const std::size_t cls = i % n_classes;
    const int la = static_cast<int>(cls / spec.n_max) + 1;
    const int lb = static_cast<int>(cls % spec.n_max) + 1;
    out.push_back(sample_problem_in_class(la, lb, rng));
  }
  for (std::size_t i = out.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1));
    std::swap(out[i - 1], out[j]);
  }
  return out;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [k, v] : m.class_counts) counts[k] = v;
  return {{"n_max", m.spec.n_max},
          {"n_examples", m.spec.n_examples},
          {"seed", m.spec.seed},
          {"split", m.spec.split},
          {"class_counts", counts}};
}

inline DatasetManifest build_dataset(const DatasetSpec& spec, const std::filesystem::path& out) {
  DatasetManifest manifest{spec, {}};
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream os(out, std::ios::binary);
  if (!os) throw IoError("cannot open dataset for writing", out);
  for (const auto& p : generate_problems(spec)) {
    const auto doc = render_scratchpad(p);
    nlohmann::json rec = {{"a", p.a}, {"b", p.b}, {"prompt", doc.prompt_text}, {"text", doc.full_text()}};
    os << rec.dump() << '\n';
    ++manifest.class_counts[class_key(p.len_a(), p.len_b())];
  }
  if (!os) throw IoError("write failed", out);
  const auto mpath = manifest_path_for(out);
  std::ofstream ms(mpath, std::ios::binary);
  if (!ms) throw IoError("cannot open manifest for writing", mpath);
  ms << to_json(manifest).dump(2) << '\n';
  if (!ms) throw IoError("write failed", mpath);
  return manifest;
}

inline DatasetManifest load_manifest(const std::filesystem::path& dataset) {
  const auto mpath = manifest_path_for(dataset);
  std::ifstream is(mpath);
  if (!is) throw IoError("cannot open manifest", mpath);
  const auto j = nlohmann::json::parse(is);
  DatasetManifest m;
  m.spec.n_max = j.at("n_max").get<int>();
  m.spec.n_examples = j.at("n_examples").get<std::size_t>();
  m.spec.seed = j.at("seed").get<std::uint64_t>();
  m.spec.split = j.at("split").get<std::string>();
  for (const auto& [k, v] : j.at("class_counts").items()) m.class_counts[k] = v.get<std::size_t>();
  return m;
}

inline std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset", path);
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({AdditionProblem::from_digits(j.at("a").get<std::string>(), j.at("b").get<std::string>()),
                     j.at("prompt").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const std::exception& e) {
      throw IoError("malformed record on line " + std::to_string(lineno) + " (" + e.what() + ")", path);
    }
  }
  return out;
}

}  // namespace kllab

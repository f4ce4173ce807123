#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "brunet/archive.hpp"
#include "brunet/model.hpp"

namespace brunet {

inline constexpr const char* kManifestRecord = "__manifest__";

/// Model checkpoint: every named parameter as a tensor record, plus a text manifest with
/// the model config, element type and parameter names.
template <class T>
std::vector<Record> checkpoint_records(const Model<T>& m) {
  std::ostringstream manifest;
  manifest << m.config().to_key_values() << "elem_type=" << (dtype_of<T>() == DType::f32 ? "f32" : "f64") << '\n'
           << "params=";
  bool first = true;
  std::vector<Record> records;
  for (const auto& e : m.params()) {
    if (e.value.empty()) throw InvalidArgument("cannot checkpoint a shape-only model");
    manifest << (first ? "" : ",") << e.name;
    first = false;
    records.push_back(Record::from_tensor(e.name, e.value));
  }
  manifest << '\n';
  records.push_back(Record::from_text(kManifestRecord, manifest.str()));
  return records;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& m) {
  archive_save(path, checkpoint_records(m));
}

inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

template <class T>
Model<T> model_from_records(const std::vector<Record>& records) {
  const auto kv = parse_key_values(find_record(records, kManifestRecord).text());
  const std::string want = dtype_of<T>() == DType::f32 ? "f32" : "f64";
  if (auto it = kv.find("elem_type"); it == kv.end() || it->second != want)
    throw FormatError("checkpoint element type does not match the requested model type " + want, 0);
  Model<T> m(ModelConfig::from_key_values(kv), BuildOptions{0, false});
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& e = m.params().entry(i);
    const Record* r = try_find_record(records, e.name);
    if (!r) throw FormatError("checkpoint lacks parameter '" + e.name + "'", 0);
    Tensor<T> t = r->tensor<T>();
    if (!(t.shape() == e.shape))
      throw FormatError("parameter '" + e.name + "' has shape " + t.shape().str() + ", expected " + e.shape.str(), 0);
    m.params().mutable_value(i) = std::move(t);
  }
  return m;
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return model_from_records<T>(archive_load(path));
}

}  // namespace brunet

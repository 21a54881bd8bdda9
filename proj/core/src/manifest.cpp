#include "triad/manifest.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "triad/error.hpp"

namespace triad {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::pretrain: return "pretrain";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "pretrain";
}

Split parse_split(std::string_view s) {
  if (s == "pretrain") return Split::pretrain;
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  fail(ErrorKind::validation, "unknown split '" + std::string(s) + "'");
}

std::filesystem::path DatasetManifest::resolve(const ManifestRecord& r) const {
  std::filesystem::path p(r.volume_path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<const ManifestRecord*> DatasetManifest::with_split(Split split) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

DatasetManifest parse_manifest(std::string_view text, std::filesystem::path base_dir) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::parse, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    auto field = [&](const char* key) -> std::string {
      if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
        fail(ErrorKind::parse, "manifest line " + std::to_string(line_no) + ": missing string field '" + key + "'");
      }
      return j[key].get<std::string>();
    };
    ManifestRecord r;
    r.id = field("id");
    r.volume_path = field("volume_path");
    r.organ = field("organ");
    r.modality = field("modality");
    r.description = field("description");
    try {
      r.split = parse_split(field("split"));
    } catch (const Error& e) {
      fail(ErrorKind::parse, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    m.records.push_back(std::move(r));
  }
  validate_manifest(m);
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path());
}

void validate_manifest(const DatasetManifest& m, bool check_paths) {
  std::set<std::string> ids;
  for (const auto& r : m.records) {
    if (r.id.empty()) fail(ErrorKind::validation, "record with empty id");
    if (!ids.insert(r.id).second) fail(ErrorKind::validation, "duplicate id '" + r.id + "'");
    if (check_paths && !std::filesystem::exists(m.resolve(r))) {
      fail(ErrorKind::validation, "record '" + r.id + "': volume path " + m.resolve(r).string() + " does not exist");
    }
  }
}

std::string to_jsonl(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["volume_path"] = r.volume_path;
  j["organ"] = r.organ;
  j["modality"] = r.modality;
  j["description"] = r.description;
  j["split"] = std::string(to_string(r.split));
  return j.dump();
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write manifest " + path.string());
  for (const auto& r : m.records) out << to_jsonl(r) << '\n';
}

}  // namespace triad

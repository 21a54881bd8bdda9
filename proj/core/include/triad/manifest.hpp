#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace triad {

enum class Split { pretrain, train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view s);

struct ManifestRecord {
  std::string id;
  std::string volume_path;  // relative paths resolve against the manifest's directory
  std::string organ;
  std::string modality;
  std::string description;
  Split split = Split::pretrain;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestRecord& r) const;
  std::vector<const ManifestRecord*> with_split(Split split) const;
};

/// Parses newline-delimited JSON records. Blank lines are ignored; a line
/// missing a key raises a parse error naming the line number.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(std::string_view text, std::filesystem::path base_dir = {});

/// Duplicate ids raise a validation error naming the id. With check_paths,
/// every volume_path must exist on disk.
void validate_manifest(const DatasetManifest& m, bool check_paths = false);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
std::string to_jsonl(const ManifestRecord& r);

}  // namespace triad

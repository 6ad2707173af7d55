#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace scatterbench::ingest {

/// One labeled clip. `clip_path` is relative to the manifest's root
/// directory and uses '/' separators.
struct ManifestEntry {
  std::string clip_path;
  std::string hair_type;
  std::string condition;
  int round_id = 1;
  std::string head_id;
  double duration_s = 0.0;
  double sample_rate = 0.0;
  int channel = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.clip_path; }

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.entries == b.entries;
  }
};

inline constexpr const char* kManifestHeader =
    "clip_path,hair_type,condition,round_id,head_id,duration_s,sample_rate,channel";

/// Writes the CSV manifest. Paths are rewritten relative to the directory
/// that will contain the file.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& file);

/// Parses a CSV manifest; root becomes the file's directory. Labels are not
/// checked here (see validate_manifest).
DatasetManifest load_manifest(const std::filesystem::path& file);

/// Every problem found, one message per offender: unknown labels, bad
/// numeric fields, duplicate paths and (when `check_files`) missing files.
std::vector<std::string> manifest_issues(const DatasetManifest& m, bool check_files = true);

/// Throws ValidationError listing every issue.
void validate_manifest(const DatasetManifest& m, bool check_files = true);

/// How labels are attached to scanned files. Without a mapping file the
/// directory layout `<condition>/<head>/<round>/*.wav` is used and the hair
/// type is `head_to_type[head]` (identity when absent).
struct LabelingRule {
  std::optional<std::filesystem::path> mapping_file;
  std::map<std::string, std::string> head_to_type;
};

/// Scans `root` (WAV headers only) and returns entries sorted by path.
DatasetManifest build_manifest(const std::filesystem::path& root, const LabelingRule& rule = {});

/// Per-(condition, head) clip totals.
std::map<std::pair<std::string, std::string>, int> cell_counts(const DatasetManifest& m);

}  // namespace scatterbench::ingest

#include "scatterbench/manifest.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "scatterbench/core.hpp"
#include "scatterbench/labels.hpp"
#include "scatterbench/text.hpp"
#include "scatterbench/wav_io.hpp"

namespace fs = std::filesystem;

namespace scatterbench::ingest {
namespace {

std::string generic_relative(const fs::path& p, const fs::path& base) {
  return fs::relative(p, base).generic_string();
}

fs::path absolute_norm(const fs::path& p) { return fs::absolute(p).lexically_normal(); }

}  // namespace

void save_manifest(const DatasetManifest& m, const fs::path& file) {
  const fs::path out_dir = absolute_norm(file).parent_path();
  const fs::path src_root = absolute_norm(m.root.empty() ? fs::path(".") : m.root);
  std::ostringstream os;
  os << kManifestHeader << '\n';
  for (const ManifestEntry& e : m.entries) {
    if (e.clip_path.find_first_of(",\n\r") != std::string::npos) {
      throw FormatError("clip path contains a separator: " + e.clip_path);
    }
    const std::string path = out_dir == src_root
                                 ? e.clip_path
                                 : fs::path(src_root / e.clip_path).lexically_relative(out_dir)
                                       .generic_string();
    os << path << ',' << e.hair_type << ',' << e.condition << ',' << e.round_id << ','
       << e.head_id << ',' << text::format_double(e.duration_s) << ','
       << text::format_double(e.sample_rate) << ',' << e.channel << '\n';
  }
  text::write_file(file, os.str());
}

DatasetManifest load_manifest(const fs::path& file) {
  const auto lines = text::read_lines(file);
  if (lines.empty() || lines.front() != kManifestHeader) {
    throw FormatError("manifest header mismatch in " + file.string());
  }
  DatasetManifest m;
  m.root = absolute_norm(file).parent_path();
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = text::split_csv(lines[i]);
    const std::string where = file.string() + " line " + std::to_string(i + 1);
    if (f.size() != 8) throw FormatError(where + ": expected 8 fields");
    ManifestEntry e;
    e.clip_path = f[0];
    e.hair_type = f[1];
    e.condition = f[2];
    e.round_id = static_cast<int>(text::parse_int(f[3], where + " round_id"));
    e.head_id = f[4];
    e.duration_s = text::parse_double(f[5], where + " duration_s");
    e.sample_rate = text::parse_double(f[6], where + " sample_rate");
    e.channel = static_cast<int>(text::parse_int(f[7], where + " channel"));
    m.entries.push_back(std::move(e));
  }
  return m;
}

std::vector<std::string> manifest_issues(const DatasetManifest& m, bool check_files) {
  std::vector<std::string> issues;
  std::set<std::string> seen;
  for (const ManifestEntry& e : m.entries) {
    const std::string& p = e.clip_path;
    if (!parse_hair_type(e.hair_type)) issues.push_back(p + ": unknown hair_type '" + e.hair_type + "'");
    if (!parse_condition(e.condition)) issues.push_back(p + ": unknown condition '" + e.condition + "'");
    if (!parse_hair_type(e.head_id)) issues.push_back(p + ": unknown head_id '" + e.head_id + "'");
    if (e.round_id < 1) issues.push_back(p + ": round_id must be >= 1");
    if (!(e.duration_s > 0.0)) issues.push_back(p + ": duration_s must be > 0");
    if (!(e.sample_rate > 0.0)) issues.push_back(p + ": sample_rate must be > 0");
    if (e.channel < 0) issues.push_back(p + ": channel must be >= 0");
    if (!seen.insert(p).second) issues.push_back(p + ": duplicate clip_path");
    if (check_files) {
      std::error_code ec;
      if (!fs::is_regular_file(m.resolve(e), ec)) issues.push_back(p + ": file missing");
    }
  }
  return issues;
}

void validate_manifest(const DatasetManifest& m, bool check_files) {
  const auto issues = manifest_issues(m, check_files);
  if (issues.empty()) return;
  std::ostringstream os;
  os << "manifest has " << issues.size() << " issue(s):";
  for (const auto& s : issues) os << "\n  " << s;
  throw ValidationError(os.str());
}

DatasetManifest build_manifest(const fs::path& root, const LabelingRule& rule) {
  DatasetManifest m;
  m.root = absolute_norm(root);
  if (!fs::is_directory(m.root)) throw IoError("not a directory: " + root.string());
  auto add = [&](const fs::path& file, ManifestEntry e) {
    const WavInfo info = read_wav_info(file);
    e.duration_s = info.duration();
    e.sample_rate = info.sample_rate;
    m.entries.push_back(std::move(e));
  };
  if (rule.mapping_file) {
    const auto lines = text::read_lines(*rule.mapping_file);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const auto f = text::split_csv(lines[i]);
      if (f.size() != 5) {
        throw FormatError(rule.mapping_file->string() + " line " + std::to_string(i + 1) +
                          ": expected clip_path,hair_type,condition,round_id,head_id");
      }
      ManifestEntry e;
      e.clip_path = f[0];
      e.hair_type = f[1];
      e.condition = f[2];
      e.round_id = static_cast<int>(text::parse_int(f[3], "round_id"));
      e.head_id = f[4];
      add(m.root / e.clip_path, std::move(e));
    }
  } else {
    std::vector<fs::path> files;
    for (const auto& item : fs::recursive_directory_iterator(m.root)) {
      if (item.is_regular_file() && item.path().extension() == ".wav") files.push_back(item.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<std::string> bad;
    for (const fs::path& file : files) {
      const fs::path rel = fs::relative(file, m.root);
      std::vector<std::string> parts;
      for (const auto& part : rel) parts.push_back(part.string());
      if (parts.size() != 4) {
        bad.push_back(rel.generic_string() + ": expected <condition>/<head>/<round>/<clip>.wav");
        continue;
      }
      ManifestEntry e;
      e.clip_path = generic_relative(file, m.root);
      e.condition = parts[0];
      e.head_id = parts[1];
      const auto it = rule.head_to_type.find(parts[1]);
      e.hair_type = it == rule.head_to_type.end() ? parts[1] : it->second;
      try {
        e.round_id = static_cast<int>(text::parse_int(parts[2], "round"));
      } catch (const FormatError&) {
        bad.push_back(rel.generic_string() + ": round directory is not an integer");
        continue;
      }
      add(file, std::move(e));
    }
    if (!bad.empty()) {
      std::ostringstream os;
      os << "unrecognized layout:";
      for (const auto& s : bad) os << "\n  " << s;
      throw ValidationError(os.str());
    }
  }
  std::sort(m.entries.begin(), m.entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.clip_path < b.clip_path; });
  validate_manifest(m, true);
  return m;
}

std::map<std::pair<std::string, std::string>, int> cell_counts(const DatasetManifest& m) {
  std::map<std::pair<std::string, std::string>, int> counts;
  for (const auto& e : m.entries) ++counts[{e.condition, e.head_id}];
  return counts;
}

}  // namespace scatterbench::ingest

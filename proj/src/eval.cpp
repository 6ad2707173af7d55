#include "scatterbench/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "scatterbench/core.hpp"
#include "scatterbench/labels.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/text.hpp"

namespace scatterbench::eval {

const char* to_string(Task t) {
  return t == Task::hair_type_4class ? "hair_type_4class" : "hair_condition_3class";
}

Task parse_task(const std::string& s) {
  if (s == "hair_type_4class") return Task::hair_type_4class;
  if (s == "hair_condition_3class") return Task::hair_condition_3class;
  throw ConfigError("unknown task '" + s + "' (expected hair_type_4class|hair_condition_3class)");
}

std::vector<std::string> class_names(Task t) {
  std::vector<std::string> out;
  if (t == Task::hair_type_4class) {
    for (auto h : kHairTypes) out.emplace_back(scatterbench::to_string(h));
  } else {
    for (auto c : kConditions) out.emplace_back(scatterbench::to_string(c));
  }
  return out;
}

int label_of(const ingest::ManifestEntry& e, Task t) {
  if (t == Task::hair_type_4class) {
    const auto h = parse_hair_type(e.hair_type);
    if (!h) throw LabelError("unknown hair type '" + e.hair_type + "' for " + e.clip_path);
    return index_of(*h);
  }
  const auto c = parse_condition(e.condition);
  if (!c) throw LabelError("unknown condition '" + e.condition + "' for " + e.clip_path);
  return index_of(*c);
}

std::vector<int> labels_for(const ingest::DatasetManifest& m, Task t) {
  std::vector<int> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back(label_of(e, t));
  return out;
}

// --- splits ----------------------------------------------------------------

void stratified_dev_split(const std::vector<std::size_t>& pool, const std::vector<int>& labels, double fraction,
                          std::uint64_t seed, std::vector<std::size_t>& train, std::vector<std::size_t>& dev) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("dev fraction must be in (0, 1)");
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i : pool) by_label[labels[i]].push_back(i);
  Rng rng(seed);
  std::vector<char> to_dev(labels.size(), 0);
  for (auto& [label, members] : by_label) {
    for (std::size_t i = members.size(); i > 1; --i) {
      const auto j = std::min(i - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)));
      std::swap(members[i - 1], members[j]);
    }
    auto n_dev = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    if (members.size() >= 2) n_dev = std::max<std::size_t>(n_dev, 1);
    for (std::size_t k = 0; k < n_dev && k + 1 < members.size(); ++k) to_dev[members[k]] = 1;
  }
  train.clear();
  dev.clear();
  for (std::size_t i : pool) (to_dev[i] ? dev : train).push_back(i);
}

std::vector<FoldSpec> round_robin_folds(const std::vector<int>& keys, const std::vector<int>& labels,
                                        std::uint64_t seed, double dev_fraction) {
  if (keys.size() != labels.size()) throw ShapeError("round robin: keys and labels differ in length");
  std::vector<int> distinct(keys);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) {
    throw ConfigError("round robin: need at least 2 distinct rounds, found " + std::to_string(distinct.size()));
  }
  std::vector<FoldSpec> folds;
  const std::size_t n = distinct.size();
  for (std::size_t k = 0; k < n; ++k) {
    FoldSpec f;
    f.fold_id = static_cast<int>(k);
    f.name = "round" + std::to_string(distinct[k]);
    const int dev_key = distinct[(k + 1) % n];
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      if (keys[i] == distinct[k]) {
        f.test.push_back(i);
      } else if (n > 2 && keys[i] == dev_key) {
        f.dev.push_back(i);
      } else {
        rest.push_back(i);
      }
    }
    if (n > 2) {
      f.train = std::move(rest);
    } else {
      stratified_dev_split(rest, labels, dev_fraction, derive_seed(seed, {static_cast<std::uint64_t>(k)}), f.train,
                           f.dev);
    }
    folds.push_back(std::move(f));
  }
  return folds;
}

std::vector<FoldSpec> round_robin_folds(const ingest::DatasetManifest& m, Task t, std::uint64_t seed) {
  std::vector<int> keys;
  for (const auto& e : m.entries) keys.push_back(e.round_id);
  return round_robin_folds(keys, labels_for(m, t), seed);
}

FoldSpec head_holdout_split(const ingest::DatasetManifest& m, std::uint64_t seed, double dev_fraction) {
  const std::set<std::string> train_heads{"A", "B"}, test_heads{"MAMI", "MINAYO"};
  std::map<std::string, std::size_t> seen;
  std::vector<std::size_t> pool;
  FoldSpec f;
  f.name = "head_holdout";
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& h = m.entries[i].head_id;
    ++seen[h];
    if (train_heads.count(h)) pool.push_back(i);
    else if (test_heads.count(h)) f.test.push_back(i);
  }
  for (const char* h : {"A", "B", "MAMI", "MINAYO"}) {
    if (!seen.count(h)) throw ConfigError(std::string("head holdout: manifest has no clips for head '") + h + "'");
  }
  stratified_dev_split(pool, labels_for(m, Task::hair_condition_3class), dev_fraction, seed, f.train, f.dev);
  return f;
}

// --- metrics ---------------------------------------------------------------

void PredictionSet::validate() const {
  if (scores.size() != labels.size()) {
    throw ShapeError("predictions: " + std::to_string(scores.size()) + " score rows for " +
                     std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != n_classes) {
      throw ShapeError("predictions: row " + std::to_string(i) + " has " + std::to_string(scores[i].size()) +
                       " scores, expected " + std::to_string(n_classes));
    }
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
      throw LabelError("predictions: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " out of range");
    }
  }
}

void PredictionSet::append(const PredictionSet& other) {
  if (scores.empty() && labels.empty()) {
    n_classes = other.n_classes;
    log_probs = other.log_probs;
  }
  if (other.n_classes != n_classes) throw ShapeError("predictions: cannot append sets of different arity");
  if (other.log_probs != log_probs) throw ShapeError("predictions: cannot mix probabilities and log-probabilities");
  scores.insert(scores.end(), other.scores.begin(), other.scores.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

namespace {

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

ClassificationMetrics accuracy_macro_f1(const PredictionSet& p) {
  p.validate();
  if (p.labels.empty()) throw ConfigError("metrics: empty prediction set");
  const std::size_t K = p.n_classes;
  std::vector<double> tp(K, 0), fp(K, 0), fn(K, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(p.labels[i]);
    const auto a = static_cast<std::size_t>(argmax(p.scores[i]));
    if (a == y) {
      ++correct;
      tp[y] += 1;
    } else {
      fp[a] += 1;
      fn[y] += 1;
    }
  }
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(p.labels.size());
  m.f1.assign(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double denom = 2 * tp[k] + fp[k] + fn[k];
    if (denom == 0) {
      m.absent_classes.push_back(static_cast<int>(k));
      continue;
    }
    m.f1[k] = 2 * tp[k] / denom;
  }
  m.macro_f1 = std::accumulate(m.f1.begin(), m.f1.end(), 0.0) / static_cast<double>(K);
  return m;
}

RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& positive) {
  if (scores.size() != positive.size()) throw ShapeError("roc: scores and labels differ in length");
  const auto P = static_cast<double>(std::count_if(positive.begin(), positive.end(), [](int v) { return v != 0; }));
  const double N = static_cast<double>(positive.size()) - P;
  constexpr double inf = std::numeric_limits<double>::infinity();
  RocCurve c;
  if (P == 0 || N == 0) {
    c.points = {{0.0, 0.0, inf}, {1.0, 1.0, -inf}};
    return c;
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  c.points.push_back({0.0, 0.0, inf});
  double tp = 0, fp = 0, area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (positive[order[i]] ? tp : fp) += 1;
    const RocPoint next{fp / N, tp / P, s};
    const auto& prev = c.points.back();
    area += (next.fpr - prev.fpr) * (next.tpr + prev.tpr) / 2.0;
    c.points.push_back(next);
  }
  c.auc = area;
  return c;
}

RocReport roc_auc_ovr(const PredictionSet& p) {
  p.validate();
  RocReport r;
  std::vector<double> defined;
  for (std::size_t k = 0; k < p.n_classes; ++k) {
    std::vector<double> s(p.scores.size());
    std::vector<int> pos(p.scores.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = p.scores[i][k];
      pos[i] = static_cast<std::size_t>(p.labels[i]) == k;
    }
    r.curves.push_back(roc_curve(s, pos));
    if (r.curves.back().auc) {
      defined.push_back(*r.curves.back().auc);
    } else {
      r.undefined_classes.push_back(static_cast<int>(k));
      r.warnings.push_back("class " + std::to_string(k) +
                           " lacks positives or negatives; its AUC is undefined and excluded from the average");
    }
  }
  r.average_auc = defined.empty() ? std::numeric_limits<double>::quiet_NaN()
                                  : std::accumulate(defined.begin(), defined.end(), 0.0) /
                                        static_cast<double>(defined.size());
  return r;
}

// --- reports ---------------------------------------------------------------

FoldMetrics fold_metrics(const std::string& fold, const PredictionSet& p) {
  const auto cm = accuracy_macro_f1(p);
  const auto roc = roc_auc_ovr(p);
  FoldMetrics f;
  f.fold = fold;
  f.accuracy = cm.accuracy;
  f.macro_f1 = cm.macro_f1;
  for (const auto& c : roc.curves) f.auc.push_back(c.auc);
  f.auc_avg = roc.average_auc;
  return f;
}

Summary summarize(std::vector<double> values) {
  std::erase_if(values, [](double v) { return std::isnan(v); });
  Summary s;
  s.count = values.size();
  if (values.empty()) {
    s.mean = s.std = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  std::vector<double> sq;
  for (double v : values) sq.push_back((v - s.mean) * (v - s.mean));
  std::sort(sq.begin(), sq.end());
  s.std = std::sqrt(std::accumulate(sq.begin(), sq.end(), 0.0) / n);
  return s;
}

std::string format_mean_std(const Summary& s, int digits) {
  if (s.count == 0) return "NA";
  return text::format_fixed(s.mean, digits) + " ± " + text::format_fixed(s.std, digits);
}

ExperimentReport aggregate_report(const std::string& task, const std::string& model,
                                  const std::vector<std::string>& class_names, const std::vector<FoldMetrics>& folds,
                                  const PredictionSet& pooled) {
  if (folds.empty()) throw ConfigError("report: no folds to aggregate");
  ExperimentReport r;
  r.task = task;
  r.model = model;
  r.class_names = class_names;
  r.folds = folds;
  std::vector<double> acc, f1, avg;
  std::vector<std::vector<double>> auc(class_names.size());
  for (const auto& f : folds) {
    if (f.auc.size() != class_names.size()) throw ShapeError("report: fold " + f.fold + " has the wrong class count");
    acc.push_back(f.accuracy);
    f1.push_back(f.macro_f1);
    avg.push_back(f.auc_avg);
    for (std::size_t k = 0; k < f.auc.size(); ++k) {
      auc[k].push_back(f.auc[k] ? *f.auc[k] : std::numeric_limits<double>::quiet_NaN());
    }
  }
  r.accuracy = summarize(acc);
  r.macro_f1 = summarize(f1);
  r.auc_avg = summarize(avg);
  for (auto& v : auc) r.auc.push_back(summarize(v));
  r.roc = roc_auc_ovr(pooled);
  return r;
}

namespace {

std::string num(double v) { return std::isnan(v) ? "NA" : text::format_double(v); }
std::string fixed(double v, int d) { return std::isnan(v) ? "NA" : text::format_fixed(v, d); }

}  // namespace

std::string metrics_csv(const ExperimentReport& r) {
  std::ostringstream os;
  os << "fold,task,model,accuracy,macro_f1";
  for (const auto& c : r.class_names) os << ",auc_" << c;
  os << ",auc_avg\n";
  for (const auto& f : r.folds) {
    os << f.fold << ',' << r.task << ',' << r.model << ',' << num(f.accuracy) << ',' << num(f.macro_f1);
    for (const auto& a : f.auc) os << ',' << (a ? num(*a) : "NA");
    os << ',' << num(f.auc_avg) << '\n';
  }
  auto row = [&](const char* name, auto pick) {
    os << name << ',' << r.task << ',' << r.model << ',' << fixed(pick(r.accuracy), 3) << ','
       << fixed(pick(r.macro_f1), 3);
    for (const auto& a : r.auc) os << ',' << fixed(pick(a), 2);
    os << ',' << fixed(pick(r.auc_avg), 2) << '\n';
  };
  row("mean", [](const Summary& s) { return s.mean; });
  row("std", [](const Summary& s) { return s.std; });
  return os.str();
}

std::vector<std::vector<std::pair<std::string, std::string>>> read_metrics_csv(const std::filesystem::path& path) {
  const auto lines = text::read_lines(path);
  if (lines.empty() || !lines[0].starts_with("fold,task,model,")) {
    throw FormatError(path.string() + ": not a metrics file");
  }
  const auto header = text::split_csv(lines[0]);
  std::vector<std::vector<std::pair<std::string, std::string>>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto cells = text::split_csv(lines[i]);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + ": row " + std::to_string(i) + " has " + std::to_string(cells.size()) +
                        " fields, expected " + std::to_string(header.size()));
    }
    std::vector<std::pair<std::string, std::string>> row;
    for (std::size_t c = 0; c < cells.size(); ++c) row.emplace_back(header[c], cells[c]);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string roc_csv(const RocCurve& c) {
  std::ostringstream os;
  os << "fpr,tpr,threshold\n";
  for (const auto& p : c.points) {
    os << text::format_double(p.fpr) << ',' << text::format_double(p.tpr) << ',';
    if (std::isinf(p.threshold)) os << (p.threshold > 0 ? "inf" : "-inf");
    else os << text::format_double(p.threshold);
    os << '\n';
  }
  return os.str();
}

std::string roc_svg(const RocReport& r, const std::vector<std::string>& class_names) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  constexpr double W = 480, H = 480, L = 60, T = 20, S = 380;
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << S << "\" height=\"" << S
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T + S << "\" x2=\"" << L + S << "\" y2=\"" << T
     << "\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    os << "<text x=\"" << L + v * S << "\" y=\"" << T + S + 16 << "\" font-size=\"11\" text-anchor=\"middle\">" << v
       << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << T + S - v * S + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << v
       << "</text>\n";
  }
  os << "<text x=\"" << L + S / 2 << "\" y=\"" << H - 12
     << "\" font-size=\"13\" text-anchor=\"middle\">False positive rate</text>\n";
  os << "<text x=\"16\" y=\"" << T + S / 2 << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << T + S / 2 << ")\">True positive rate</text>\n";
  for (std::size_t k = 0; k < r.curves.size(); ++k) {
    const char* color = colors[k % std::size(colors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : r.curves[k].points) os << L + p.fpr * S << ',' << T + S - p.tpr * S << ' ';
    os << "\"/>\n";
    const double ly = T + S - 20 - 18.0 * static_cast<double>(r.curves.size() - 1 - k);
    const std::string name = k < class_names.size() ? class_names[k] : std::to_string(k);
    const auto& auc = r.curves[k].auc;
    os << "<line x1=\"" << L + S - 150 << "\" y1=\"" << ly << "\" x2=\"" << L + S - 130 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << L + S - 124 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">" << name << " (AUC "
       << (auc ? text::format_fixed(*auc, 2) : std::string("NA")) << ")</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string summary_table(const std::vector<ExperimentReport>& reports) {
  std::size_t width = 28;
  for (const auto& r : reports) width = std::max(width, r.task.size() + r.model.size() + 3);
  const int w = static_cast<int>(width);
  std::ostringstream os;
  os << std::left << std::setw(w) << "model" << std::setw(18) << "accuracy" << std::setw(18) << "f1-score"
     << "average auc\n";
  for (const auto& r : reports) {
    os << std::setw(w) << (r.task + "/" + r.model) << std::setw(19) << format_mean_std(r.accuracy, 3)
       << std::setw(19) << format_mean_std(r.macro_f1, 3) << format_mean_std(r.auc_avg, 2) << '\n';
  }
  return os.str();
}

std::vector<std::filesystem::path> export_report(const ExperimentReport& r, const std::filesystem::path& out_dir) {
  std::vector<std::filesystem::path> files;
  auto put = [&](const std::string& name, const std::string& content) {
    text::write_file(out_dir / name, content);
    files.push_back(out_dir / name);
  };
  put("metrics.csv", metrics_csv(r));
  for (std::size_t k = 0; k < r.roc.curves.size(); ++k) {
    const std::string name = k < r.class_names.size() ? r.class_names[k] : std::to_string(k);
    put("roc_" + name + ".csv", roc_csv(r.roc.curves[k]));
  }
  put("roc.svg", roc_svg(r.roc, r.class_names));
  put("summary.txt", summary_table({r}));
  return files;
}

void save_predictions(const PredictionSet& p, const std::vector<std::string>& clip_paths,
                      const std::vector<std::string>& class_names, const std::filesystem::path& path) {
  p.validate();
  if (clip_paths.size() != p.labels.size() || class_names.size() != p.n_classes) {
    throw ShapeError("predictions: clip or class list does not match the prediction set");
  }
  std::ostringstream os;
  os << "clip_path,label";
  for (const auto& c : class_names) os << ',' << c;
  os << '\n';
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    os << clip_paths[i] << ',' << class_names[static_cast<std::size_t>(p.labels[i])];
    for (double v : p.scores[i]) os << ',' << text::format_double(p.log_probs ? std::exp(v) : v);
    os << '\n';
  }
  text::write_file(path, os.str());
}

PredictionSet load_predictions(const std::filesystem::path& path, std::vector<std::string>* class_names,
                               std::vector<std::string>* clip_paths) {
  const auto lines = text::read_lines(path);
  if (lines.empty() || !lines[0].starts_with("clip_path,label,")) {
    throw FormatError(path.string() + ": expected header clip_path,label,<classes>");
  }
  const auto header = text::split_csv(lines[0]);
  const std::vector<std::string> names(header.begin() + 2, header.end());
  PredictionSet p;
  p.n_classes = names.size();
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto cells = text::split_csv(lines[i]);
    const std::string where = path.string() + " row " + std::to_string(i);
    if (cells.size() != header.size()) throw FormatError(where + ": wrong number of fields");
    const auto it = std::find(names.begin(), names.end(), cells[1]);
    if (it == names.end()) throw LabelError(where + ": unknown label '" + cells[1] + "'");
    p.labels.push_back(static_cast<int>(it - names.begin()));
    std::vector<double> s;
    for (std::size_t c = 2; c < cells.size(); ++c) s.push_back(text::parse_double(cells[c], where));
    p.scores.push_back(std::move(s));
    if (clip_paths) clip_paths->push_back(cells[0]);
  }
  if (class_names) *class_names = names;
  return p;
}

}  // namespace scatterbench::eval

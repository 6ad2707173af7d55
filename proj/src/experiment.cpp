#include "scatterbench/experiment.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "scatterbench/ingest.hpp"
#include "scatterbench/labels.hpp"
#include "scatterbench/parallel.hpp"
#include "scatterbench/scatterlab.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/text.hpp"
#include "scatterbench/wav_io.hpp"

namespace scatterbench::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Split s) { return s == Split::round_robin ? "round_robin" : "head_holdout"; }

int default_jobs() {
  if (const char* env = std::getenv("SCATTERBENCH_JOBS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0 && v <= 1024) return static_cast<int>(v);
  }
  return 1;
}

// --- config reading ---------------------------------------------------------

namespace {

/// Reads fields of one JSON object, recording problems under `path` and
/// flagging keys that were never read.
class Fields {
 public:
  Fields(const json* j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (j_ && !j_->is_object()) {
      error("", "expected an object");
      j_ = nullptr;
    }
  }
  ~Fields() {
    if (!j_) return;
    for (auto it = j_->begin(); it != j_->end(); ++it) {
      if (!used_.count(it.key())) error(it.key(), "unknown field");
    }
  }
  Fields(const Fields&) = delete;
  Fields& operator=(const Fields&) = delete;

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  void error(const std::string& key, const std::string& msg) {
    const std::string p = key.empty() ? path_ : at(key);
    errors_.push_back((p.empty() ? std::string("config") : p) + ": " + msg);
  }

  const json* find(const std::string& key) {
    used_.insert(key);
    if (!j_) return nullptr;
    const auto it = j_->find(key);
    return it == j_->end() ? nullptr : &*it;
  }
  bool has(const std::string& key) const { return j_ && j_->contains(key); }
  bool is_null(const std::string& key) const { return j_ && j_->contains(key) && j_->at(key).is_null(); }

  long long integer(const std::string& key, long long def, long long lo, long long hi) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_number_integer()) {
      error(key, "expected an integer");
      return def;
    }
    const long long x = v->get<long long>();
    if (x < lo || x > hi) {
      error(key, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "], got " + std::to_string(x));
      return def;
    }
    return x;
  }
  double number(const std::string& key, double def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_number()) {
      error(key, "expected a number");
      return def;
    }
    return v->get<double>();
  }
  std::optional<double> optional_number(const std::string& key, std::optional<double> def) {
    const json* v = find(key);
    if (!v) return def;
    if (v->is_null()) return std::nullopt;
    if (!v->is_number()) {
      error(key, "expected a number or null");
      return def;
    }
    return v->get<double>();
  }
  bool boolean(const std::string& key, bool def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_boolean()) {
      error(key, "expected true or false");
      return def;
    }
    return v->get<bool>();
  }
  std::string string(const std::string& key, const std::string& def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_string()) {
      error(key, "expected a string");
      return def;
    }
    return v->get<std::string>();
  }
  template <typename T>
  std::vector<T> list(const std::string& key, const std::vector<T>& def) {
    const json* v = find(key);
    if (!v) return def;
    std::vector<T> out;
    bool ok = v->is_array();
    if (ok) {
      for (const auto& e : *v) {
        if constexpr (std::is_same_v<T, std::string>) ok = ok && e.is_string();
        else if constexpr (std::is_integral_v<T>) ok = ok && e.is_number_integer();
        else ok = ok && e.is_number();
        if (!ok) break;
        out.push_back(e.get<T>());
      }
    }
    if (!ok) {
      error(key, "expected a list of " + std::string(std::is_same_v<T, std::string> ? "strings"
                                                     : std::is_integral_v<T>         ? "integers"
                                                                                     : "numbers"));
      return def;
    }
    return out;
  }
  const json* object(const std::string& key) {
    const json* v = find(key);
    return v && !v->is_null() ? v : nullptr;
  }
  void check(bool ok, const std::string& key, const std::string& msg) {
    if (!ok) error(key, msg);
  }

 private:
  const json* j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> used_;
};

fs::path resolve_path(const std::string& p, const fs::path& base) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  return path.lexically_normal();
}

stimulus::StimulusSpec read_stimulus(const json* j, const std::string& path, std::vector<std::string>& errors) {
  Fields f(j, path, errors);
  stimulus::StimulusSpec s;
  s.f_start = f.number("f_start", s.f_start);
  s.f_end = f.number("f_end", s.f_end);
  s.duration = f.number("duration", s.duration);
  s.sample_rate = f.number("sample_rate", s.sample_rate);
  s.amplitude = f.number("amplitude", s.amplitude);
  s.fade_ms = f.number("fade_ms", s.fade_ms);
  try {
    s.validate();
  } catch (const Error& e) {
    f.error("", e.what());
  }
  return s;
}

CorpusSpec read_corpus(const json* j, const std::string& path, eval::Task task, const fs::path& base,
                       std::vector<std::string>& errors) {
  Fields f(j, path, errors);
  CorpusSpec c;
  const std::string source = f.string("source", "synth");
  if (source == "manifest") {
    c.source = CorpusSpec::Source::manifest;
    const std::string m = f.string("manifest", "");
    if (m.empty()) {
      f.error("manifest", "required when source is manifest");
    } else {
      c.manifest = resolve_path(m, base);
      if (!fs::is_regular_file(c.manifest)) f.error("manifest", "file not found: " + c.manifest.string());
    }
    for (const char* k : {"preset", "clips_per_cell", "conditions", "rounds_per_condition", "separation", "snr_db",
                          "write_audio", "stimulus"}) {
      if (f.has(k)) {
        f.find(k);
        f.error(k, "only valid for synth corpora");
      }
    }
    return c;
  }
  if (source != "synth") f.error("source", "expected synth or manifest, got '" + source + "'");
  if (f.has("manifest")) {
    f.find("manifest");
    f.error("manifest", "only valid when source is manifest");
  }
  c.preset = f.string("preset", c.preset);
  f.check(c.preset == "uniform" || c.preset == "table1", "preset", "expected uniform or table1");
  c.clips_per_cell = static_cast<int>(f.integer("clips_per_cell", c.clips_per_cell, 1, 100000));
  const std::vector<std::string> default_conditions =
      task == eval::Task::hair_type_4class ? std::vector<std::string>{"dry"}
                                           : std::vector<std::string>{"dry", "shampoo", "cream"};
  c.conditions = f.list<std::string>("conditions", default_conditions);
  std::set<std::string> seen;
  for (const auto& cond : c.conditions) {
    if (!parse_condition(cond)) f.error("conditions", "unknown condition '" + cond + "'");
    if (!seen.insert(cond).second) f.error("conditions", "duplicate condition '" + cond + "'");
  }
  f.check(!c.conditions.empty(), "conditions", "must not be empty");
  if (task == eval::Task::hair_type_4class && !seen.count("dry")) {
    f.error("conditions", "hair_type_4class uses dry clips, so dry must be listed");
  }
  if (task == eval::Task::hair_condition_3class && seen.size() < 2) {
    f.error("conditions", "hair_condition_3class needs at least two conditions");
  }
  c.rounds_per_condition = static_cast<int>(f.integer("rounds_per_condition", c.rounds_per_condition, 1, 6));
  if (c.preset == "table1" && f.has("rounds_per_condition") && c.rounds_per_condition != 6) {
    f.error("rounds_per_condition", "the table1 preset always uses 6 rounds");
  }
  if (c.preset == "table1") c.rounds_per_condition = 6;
  if (c.preset == "table1" && f.has("clips_per_cell")) f.error("clips_per_cell", "not used by the table1 preset");
  c.separation = f.number("separation", c.separation);
  f.check(c.separation > 0.0 && c.separation <= 1.0, "separation", "must be in (0, 1]");
  c.snr_db = f.optional_number("snr_db", c.snr_db);
  c.write_audio = f.boolean("write_audio", c.write_audio);
  c.stimulus = read_stimulus(f.object("stimulus"), f.at("stimulus"), errors);
  return c;
}

features::FeatureConfig read_features(const json* j, const std::string& path, double sample_rate,
                                      std::vector<std::string>& errors) {
  Fields f(j, path, errors);
  features::FeatureConfig c;
  c.n_fft = static_cast<std::size_t>(f.integer("n_fft", static_cast<long long>(c.n_fft), 2, 1 << 20));
  c.hop = static_cast<std::size_t>(f.integer("hop", static_cast<long long>(c.hop), 1, 1 << 20));
  c.n_mels = static_cast<std::size_t>(f.integer("n_mels", static_cast<long long>(c.n_mels), 1, 1024));
  c.f_low = f.number("f_low", c.f_low);
  c.f_high = f.number("f_high", c.f_high);
  c.log_floor = f.number("log_floor", c.log_floor);
  if (f.object("target_frames")) {
    c.target_frames = static_cast<std::size_t>(f.integer("target_frames", 1, 1, 1 << 24));
  } else {
    f.find("target_frames");
  }
  c.norm_mean = f.number("norm_mean", c.norm_mean);
  c.norm_std = f.number("norm_std", c.norm_std);
  c.time_pool = static_cast<std::size_t>(f.integer("time_pool", 16, 1, 4096));
  try {
    c.validate(sample_rate);
  } catch (const Error& e) {
    f.error("", e.what());
  }
  return c;
}

IngestSpec read_ingest(const json* j, const std::string& path, std::vector<std::string>& errors) {
  Fields f(j, path, errors);
  IngestSpec s;
  s.target_rate = f.number("target_rate", s.target_rate);
  f.check(s.target_rate > 0.0, "target_rate", "must be > 0");
  s.trim_silence = f.boolean("trim_silence", s.trim_silence);
  s.trim_threshold_db = f.number("trim_threshold_db", s.trim_threshold_db);
  f.check(s.trim_threshold_db > 0.0, "trim_threshold_db", "must be > 0");
  s.trim_frame_ms = f.number("trim_frame_ms", s.trim_frame_ms);
  f.check(s.trim_frame_ms > 0.0, "trim_frame_ms", "must be > 0");
  return s;
}

models::TrainConfig read_train(const json* j, const std::string& path, int default_epochs,
                               std::vector<std::string>& errors) {
  Fields f(j, path, errors);
  models::TrainConfig t;
  t.batch_size = static_cast<std::size_t>(f.integer("batch_size", static_cast<long long>(t.batch_size), 1, 1 << 20));
  t.max_epochs = static_cast<int>(f.integer("max_epochs", default_epochs, 1, 100000));
  const std::string opt = f.string("optimizer", models::to_string(t.optimizer));
  try {
    t.optimizer = models::parse_optimizer(opt);
  } catch (const Error& e) {
    f.error("optimizer", e.what());
  }
  t.learning_rate = f.number("learning_rate", t.learning_rate);
  t.lr_decay = f.number("lr_decay", t.lr_decay);
  t.momentum = f.number("momentum", t.momentum);
  t.adam_beta1 = f.number("adam_beta1", t.adam_beta1);
  t.adam_beta2 = f.number("adam_beta2", t.adam_beta2);
  t.adam_eps = f.number("adam_eps", t.adam_eps);
  t.patience = static_cast<int>(f.integer("patience", t.patience, 1, 100000));
  t.min_delta = f.number("min_delta", t.min_delta);
  try {
    t.validate();
  } catch (const Error& e) {
    f.error("", e.what());
  }
  return t;
}

models::CnnConfig read_cnn(const json* j, const std::string& path, std::size_t n_mels,
                           std::vector<std::string>& errors) {
  Fields f(j, path, errors);
  models::CnnConfig c;
  c.stem_channels = static_cast<std::size_t>(f.integer("stem_channels", static_cast<long long>(c.stem_channels), 1, 4096));
  c.stem_kernel = static_cast<std::size_t>(f.integer("stem_kernel", static_cast<long long>(c.stem_kernel), 1, 63));
  c.stem_stride = static_cast<std::size_t>(f.integer("stem_stride", static_cast<long long>(c.stem_stride), 1, 16));
  c.stem_padding = static_cast<std::size_t>(f.integer("stem_padding", static_cast<long long>(c.stem_padding), 0, 63));
  c.stem_pool = f.boolean("stem_pool", c.stem_pool);
  if (const json* b = f.find("blocks")) {
    bool ok = b->is_array() && !b->empty();
    std::vector<models::BlockSpec> blocks;
    if (ok) {
      for (const auto& e : *b) {
        if (!(e.is_array() && e.size() == 2 && e[0].is_number_integer() && e[1].is_number_integer() &&
              e[0].get<long long>() >= 1 && e[1].get<long long>() >= 1)) {
          ok = false;
          break;
        }
        blocks.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>()});
      }
    }
    if (ok) c.blocks = blocks;
    else f.error("blocks", "expected a non-empty list of [channels, stride] pairs");
  }
  c.residual_init_scale = f.number("residual_init_scale", c.residual_init_scale);
  f.check(c.residual_init_scale > 0.0, "residual_init_scale", "must be > 0");
  // Shape checks use a nominal frame count; the run rechecks with real data.
  c.in_mels = n_mels;
  c.in_frames = 128;
  try {
    c.validate();
  } catch (const Error& e) {
    f.error("", e.what());
  }
  return c;
}

models::GbtGrid read_grid(const json* j, const std::string& path, std::vector<std::string>& errors) {
  Fields f(j, path, errors);
  models::GbtGrid g;
  g.n_rounds = f.list<int>("n_rounds", g.n_rounds);
  g.max_depth = f.list<int>("max_depth", g.max_depth);
  g.learning_rate = f.list<double>("learning_rate", g.learning_rate);
  g.subsample = f.list<double>("subsample", g.subsample);
  g.lambda = f.number("lambda", g.lambda);
  g.min_child_weight = f.number("min_child_weight", g.min_child_weight);
  g.cv_folds = static_cast<int>(f.integer("cv_folds", g.cv_folds, 2, 100));
  try {
    g.validate();
  } catch (const Error& e) {
    f.error("", e.what());
  }
  return g;
}

json stimulus_json(const stimulus::StimulusSpec& s) {
  return {{"f_start", s.f_start},   {"f_end", s.f_end},         {"duration", s.duration},
          {"sample_rate", s.sample_rate}, {"amplitude", s.amplitude}, {"fade_ms", s.fade_ms}};
}

json corpus_json(const CorpusSpec& c) {
  if (c.source == CorpusSpec::Source::manifest) return {{"source", "manifest"}, {"manifest", c.manifest.string()}};
  json j = {{"source", "synth"},
            {"preset", c.preset},
            {"conditions", c.conditions},
            {"separation", c.separation},
            {"snr_db", c.snr_db ? json(*c.snr_db) : json(nullptr)},
            {"write_audio", c.write_audio},
            {"stimulus", stimulus_json(c.stimulus)}};
  if (c.preset == "uniform") {
    j["clips_per_cell"] = c.clips_per_cell;
    j["rounds_per_condition"] = c.rounds_per_condition;
  }
  return j;
}

json train_json(const models::TrainConfig& t) {
  return {{"batch_size", t.batch_size},   {"max_epochs", t.max_epochs},
          {"optimizer", models::to_string(t.optimizer)},
          {"learning_rate", t.learning_rate}, {"lr_decay", t.lr_decay},
          {"momentum", t.momentum},       {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},   {"adam_eps", t.adam_eps},
          {"patience", t.patience},       {"min_delta", t.min_delta}};
}

}  // namespace

ValidationResult validate_config(const json& raw, const fs::path& base_dir) {
  ValidationResult result;
  auto& errors = result.errors;
  ExperimentConfig c;
  {
    Fields f(&raw, "", errors);
    if (!raw.is_object()) return result;
    c.schema_version = static_cast<int>(f.integer("schema_version", kSchemaVersion, 0, 1 << 20));
    f.check(c.schema_version == kSchemaVersion, "schema_version",
            "unsupported version " + std::to_string(c.schema_version) + " (expected " +
                std::to_string(kSchemaVersion) + ")");
    if (!f.has("task")) f.error("task", "required");
    try {
      c.task = eval::parse_task(f.string("task", "hair_type_4class"));
    } catch (const Error& e) {
      f.error("task", e.what());
    }
    const Split natural = c.task == eval::Task::hair_type_4class ? Split::round_robin : Split::head_holdout;
    const std::string split = f.string("split", to_string(natural));
    if (split == "round_robin") c.split = Split::round_robin;
    else if (split == "head_holdout") c.split = Split::head_holdout;
    else f.error("split", "expected round_robin or head_holdout, got '" + split + "'");
    if ((split == "round_robin" || split == "head_holdout") && c.split != natural) {
      f.error("split", std::string(eval::to_string(c.task)) + " requires the " + to_string(natural) + " split");
    }

    if (const json* s = f.find("seed")) {
      if (s->is_number_unsigned() || (s->is_number_integer() && s->get<long long>() >= 0)) c.seed = s->get<std::uint64_t>();
      else f.error("seed", "must be a non-negative integer");
    }

    c.corpus = read_corpus(f.object("corpus"), "corpus", c.task, base_dir, errors);
    c.ingest = read_ingest(f.object("ingest"), "ingest", errors);
    c.features = read_features(f.object("features"), "features", c.ingest.target_rate, errors);

    const bool tuning = f.object("finetune") != nullptr;
    if (!f.has("model")) f.error("model", "required");
    {
      Fields m(f.object("model"), "model", errors);
      c.model.family = m.string("family", "cnn");
      if (c.model.family == "cnn") {
        c.model.cnn = read_cnn(m.object("cnn"), "model.cnn", c.features.n_mels, errors);
        c.model.train = read_train(m.object("train"), "model.train", tuning ? 20 : 40, errors);
        for (const char* k : {"grid", "embeddings"}) {
          if (m.has(k)) {
            m.find(k);
            m.error(k, "only valid for the gbt family");
          }
        }
        if (c.ingest.trim_silence && !c.features.target_frames) {
          errors.push_back("features.target_frames: required with ingest.trim_silence for the cnn family");
        }
      } else if (c.model.family == "gbt") {
        c.model.grid = read_grid(m.object("grid"), "model.grid", errors);
        const std::string emb = m.string("embeddings", features::kStatsExtractor);
        if (emb == features::kStatsExtractor) {
          c.model.embeddings = emb;
          if (c.features.n_mels != 40) errors.push_back("features.n_mels: the stats128 embedding needs 40 mel bands");
        } else {
          const fs::path p = resolve_path(emb, base_dir);
          if (!fs::is_regular_file(p)) m.error("embeddings", "file not found: " + p.string());
          c.model.embeddings = p.string();
        }
        for (const char* k : {"cnn", "train"}) {
          if (m.has(k)) {
            m.find(k);
            m.error(k, "only valid for the cnn family");
          }
        }
      } else {
        m.error("family", "expected cnn or gbt, got '" + c.model.family + "'");
      }
    }

    if (tuning) {
      Fields t(f.object("finetune"), "finetune", errors);
      FinetuneSpec ft;
      if (c.model.family != "cnn") t.error("", "fine-tuning needs the cnn family");
      if (!t.has("strategy")) t.error("strategy", "required");
      try {
        ft.strategy = models::parse_strategy(t.string("strategy", "partial"));
      } catch (const Error& e) {
        t.error("strategy", e.what());
      }
      if (t.object("checkpoint")) {
        const fs::path p = resolve_path(t.string("checkpoint", ""), base_dir);
        if (!fs::is_regular_file(p)) t.error("checkpoint", "file not found: " + p.string());
        ft.checkpoint = p;
      } else {
        t.find("checkpoint");
      }
      try {
        ft.pretrain_task = eval::parse_task(t.string("pretrain_task", eval::to_string(ft.pretrain_task)));
      } catch (const Error& e) {
        t.error("pretrain_task", e.what());
      }
      if (ft.checkpoint) {
        for (const char* k : {"pretrain_corpus", "pretrain_train"}) {
          if (t.has(k)) {
            t.find(k);
            t.error(k, "not used when a checkpoint is given");
          }
        }
      } else {
        ft.pretrain_corpus =
            read_corpus(t.object("pretrain_corpus"), "finetune.pretrain_corpus", ft.pretrain_task, base_dir, errors);
        ft.pretrain_train = read_train(t.object("pretrain_train"), "finetune.pretrain_train", 40, errors);
      }
      c.finetune = ft;
    } else {
      f.find("finetune");
    }

    const std::string default_out = std::string("runs/") + eval::to_string(c.task) + "-" + c.model.family;
    const std::string out = f.string("output_dir", default_out);
    if (out.empty()) f.error("output_dir", "must not be empty");
    c.output_dir = resolve_path(out.empty() ? default_out : out, base_dir);
  }
  if (errors.empty()) result.config = c;
  return result;
}

ValidationResult validate_config_file(const fs::path& path) {
  json raw;
  try {
    raw = json::parse(text::read_file(path));
  } catch (const json::exception& e) {
    ValidationResult r;
    r.errors.push_back(path.string() + ": " + e.what());
    return r;
  }
  return validate_config(raw, fs::absolute(path).parent_path());
}

ExperimentConfig parse_config(const json& raw, const fs::path& base_dir) {
  auto r = validate_config(raw, base_dir);
  if (!r.config) {
    std::string msg = "invalid experiment config:";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return *r.config;
}

json to_json(const ExperimentConfig& c) {
  json features = {{"n_fft", c.features.n_fft},
                   {"hop", c.features.hop},
                   {"n_mels", c.features.n_mels},
                   {"f_low", c.features.f_low},
                   {"f_high", c.features.f_high},
                   {"log_floor", c.features.log_floor},
                   {"target_frames", c.features.target_frames ? json(*c.features.target_frames) : json(nullptr)},
                   {"norm_mean", c.features.norm_mean},
                   {"norm_std", c.features.norm_std},
                   {"time_pool", c.features.time_pool}};
  json model = {{"family", c.model.family}};
  if (c.model.family == "cnn") {
    json blocks = json::array();
    for (const auto& b : c.model.cnn.blocks) blocks.push_back({b.channels, b.stride});
    model["cnn"] = {{"stem_channels", c.model.cnn.stem_channels}, {"stem_kernel", c.model.cnn.stem_kernel},
                    {"stem_stride", c.model.cnn.stem_stride},     {"stem_padding", c.model.cnn.stem_padding},
                    {"stem_pool", c.model.cnn.stem_pool},         {"blocks", blocks},
                    {"residual_init_scale", c.model.cnn.residual_init_scale}};
    model["train"] = train_json(c.model.train);
  } else {
    const auto& g = c.model.grid;
    model["grid"] = {{"n_rounds", g.n_rounds},   {"max_depth", g.max_depth}, {"learning_rate", g.learning_rate},
                     {"subsample", g.subsample}, {"lambda", g.lambda},       {"min_child_weight", g.min_child_weight},
                     {"cv_folds", g.cv_folds}};
    model["embeddings"] = c.model.embeddings;
  }
  json j = {{"schema_version", c.schema_version},
            {"task", eval::to_string(c.task)},
            {"split", to_string(c.split)},
            {"seed", c.seed},
            {"output_dir", c.output_dir.string()},
            {"corpus", corpus_json(c.corpus)},
            {"ingest",
             {{"target_rate", c.ingest.target_rate},
              {"trim_silence", c.ingest.trim_silence},
              {"trim_threshold_db", c.ingest.trim_threshold_db},
              {"trim_frame_ms", c.ingest.trim_frame_ms}}},
            {"features", features},
            {"model", model},
            {"finetune", nullptr}};
  if (c.finetune) {
    const auto& f = *c.finetune;
    json ft = {{"strategy", models::to_string(f.strategy)}, {"pretrain_task", eval::to_string(f.pretrain_task)}};
    if (f.checkpoint) {
      ft["checkpoint"] = f.checkpoint->string();
    } else {
      ft["checkpoint"] = nullptr;
      ft["pretrain_corpus"] = corpus_json(f.pretrain_corpus);
      ft["pretrain_train"] = train_json(f.pretrain_train);
    }
    j["finetune"] = ft;
  }
  return j;
}

std::uint64_t config_digest(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return fnv1a64(j.dump());
}

void apply_override(json& raw, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  json* node = &raw;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw UsageError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// --- pipeline pieces --------------------------------------------------------

scatterlab::CorpusCounts corpus_counts(const CorpusSpec& spec) {
  std::vector<Condition> conds;
  for (const auto& c : spec.conditions) {
    const auto parsed = parse_condition(c);
    if (!parsed) throw ConfigError("unknown condition '" + c + "'");
    conds.push_back(*parsed);
  }
  if (spec.preset == "table1") {
    scatterlab::CorpusCounts out;
    for (const auto& [cell, n] : scatterlab::table1_counts()) {
      if (std::find(conds.begin(), conds.end(), cell.condition) != conds.end()) out[cell] = n;
    }
    return out;
  }
  return scatterlab::uniform_counts(spec.clips_per_cell, conds, spec.rounds_per_condition);
}

namespace {

scatterlab::CorpusOptions corpus_options(const CorpusSpec& spec, std::uint64_t seed, int jobs) {
  scatterlab::CorpusOptions o;
  o.stimulus = spec.stimulus;
  o.seed = seed;
  o.snr_db = spec.snr_db;
  o.jobs = jobs;
  return o;
}

bool keep_for_task(const std::string& condition, eval::Task task) {
  return task != eval::Task::hair_type_4class || condition == "dry";
}

Waveform ingest_clip(Waveform w, const IngestSpec& spec) {
  if (w.sample_rate() != spec.target_rate) w = ingest::resample(w, spec.target_rate);
  if (spec.trim_silence) w = ingest::trim_silence(w, spec.trim_threshold_db, spec.trim_frame_ms);
  return w;
}

}  // namespace

ingest::DatasetManifest materialize_corpus(const CorpusSpec& spec, std::uint64_t seed, const fs::path& dir,
                                           int jobs) {
  if (spec.source == CorpusSpec::Source::manifest) {
    auto m = ingest::load_manifest(spec.manifest);
    ingest::validate_manifest(m, true);
    return m;
  }
  const auto profiles = scatterlab::default_profiles(spec.separation);
  const auto counts = corpus_counts(spec);
  const auto options = corpus_options(spec, seed, jobs);
  if (spec.write_audio) return scatterlab::synth_corpus(profiles, counts, options, dir);
  auto m = scatterlab::plan_corpus(counts, options, dir);
  ingest::save_manifest(m, dir / "manifest.csv");
  return m;
}

ingest::DatasetManifest task_subset(const ingest::DatasetManifest& m, eval::Task task) {
  ingest::DatasetManifest out;
  out.root = m.root;
  for (const auto& e : m.entries) {
    if (keep_for_task(e.condition, task)) out.entries.push_back(e);
  }
  if (out.entries.empty()) throw ConfigError(std::string("corpus has no clips usable for ") + eval::to_string(task));
  return out;
}

std::vector<features::MelSpectrogram> featurize_manifest(const ingest::DatasetManifest& m, const IngestSpec& ingest,
                                                          const features::FeatureConfig& feat, int jobs) {
  feat.validate(ingest.target_rate);
  std::vector<features::MelSpectrogram> out(m.entries.size());
  parallel_for(out.size(), jobs, [&](std::size_t i) {
    const auto& e = m.entries[i];
    out[i] = features::prepare(ingest_clip(read_wav(m.resolve(e), e.channel), ingest), feat);
  });
  return out;
}

std::vector<features::MelSpectrogram> featurize_synth(const CorpusSpec& spec, std::uint64_t seed, eval::Task task,
                                                       const IngestSpec& ingest, const features::FeatureConfig& feat,
                                                       int jobs) {
  feat.validate(ingest.target_rate);
  const auto profiles = scatterlab::default_profiles(spec.separation);
  profiles.validate(spec.stimulus.sample_rate);
  const auto options = corpus_options(spec, seed, jobs);
  std::vector<scatterlab::CorpusClip> clips;
  for (const auto& c : scatterlab::corpus_clips(corpus_counts(spec))) {
    if (keep_for_task(std::string(to_string(c.cell.condition)), task)) clips.push_back(c);
  }
  const scatterlab::TrialRenderer renderer(stimulus::generate_ess(spec.stimulus));
  std::vector<features::MelSpectrogram> out(clips.size());
  parallel_for(out.size(), jobs, [&](std::size_t i) {
    const Waveform w = scatterlab::render_corpus_clip(profiles, renderer, options, clips[i].cell, clips[i].index);
    // Narrow to float as a written clip would be.
    std::vector<double> s(w.data().begin(), w.data().end());
    for (double& v : s) v = static_cast<double>(static_cast<float>(v));
    out[i] = features::prepare(ingest_clip(Waveform(std::move(s), w.sample_rate()), ingest), feat);
  });
  return out;
}

models::CnnConfig shaped_cnn(const models::CnnConfig& base, const features::MelSpectrogram& example,
                             std::size_t n_classes, std::uint64_t init_seed) {
  models::CnnConfig c = base;
  c.in_mels = example.n_mels();
  c.in_frames = example.n_frames();
  c.n_classes = n_classes;
  c.init_seed = init_seed;
  c.validate();
  return c;
}

eval::PredictionSet predict_cnn(const models::Cnn<float>& net, const std::vector<features::MelSpectrogram>& specs,
                                const std::vector<int>& labels, int jobs) {
  eval::PredictionSet p;
  p.n_classes = net.config().n_classes;
  p.log_probs = true;
  p.labels = labels;
  for (const auto& row : models::predict_log_probs(net, specs, jobs)) p.scores.emplace_back(row.begin(), row.end());
  return p;
}

eval::PredictionSet predict_gbt(const models::GbtModel& model, const models::FeatureRows& x,
                                const std::vector<int>& labels) {
  eval::PredictionSet p;
  p.n_classes = model.n_classes;
  p.labels = labels;
  for (const auto& row : x) p.scores.push_back(models::gbt_predict(model, row));
  return p;
}

// --- run ---------------------------------------------------------------------

namespace {

thread_local std::string last_stage;

template <typename F>
auto in_stage(const char* name, std::ostream* log, F&& fn) {
  if (log && last_stage != name) *log << "[" << name << "]" << std::endl;
  last_stage = name;
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  } catch (const nlohmann::json::exception& e) {
    throw StageError(name, "format", e.what());
  } catch (const std::exception& e) {
    throw StageError(name, "internal", e.what());
  }
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::vector<std::string> list_files(const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Removes what a previous run recorded in its run.json.
void clear_previous_run(const fs::path& out) {
  const fs::path record = out / "run.json";
  if (!fs::exists(record)) return;
  try {
    const json j = json::parse(text::read_file(record));
    std::set<fs::path> dirs;
    for (const auto& f : j.at("files")) {
      const fs::path p = out / f.get<std::string>();
      fs::remove(p);
      for (fs::path d = p.parent_path(); d != out && d.has_relative_path(); d = d.parent_path()) dirs.insert(d);
    }
    for (auto it = dirs.rbegin(); it != dirs.rend(); ++it) {
      std::error_code ec;
      if (fs::is_directory(*it) && fs::is_empty(*it)) fs::remove(*it, ec);
    }
  } catch (const std::exception&) {
    // An unreadable record leaves the directory as it is.
  }
  fs::remove(record);
}

struct Dataset {
  ingest::DatasetManifest manifest;
  std::vector<features::MelSpectrogram> specs;
  std::vector<int> labels;
};

Dataset build_dataset(const CorpusSpec& corpus, std::uint64_t seed, eval::Task task, const IngestSpec& ingest,
                      const features::FeatureConfig& feat, const fs::path& dir, int jobs, std::ostream* log) {
  Dataset d;
  const auto full = in_stage("corpus", log, [&] { return materialize_corpus(corpus, seed, dir / "corpus", jobs); });
  d.manifest = in_stage("ingest", log, [&] { return task_subset(full, task); });
  d.labels = in_stage("ingest", log, [&] { return eval::labels_for(d.manifest, task); });
  d.specs = in_stage("featurize", log, [&] {
    if (corpus.source == CorpusSpec::Source::synth && !corpus.write_audio) {
      return featurize_synth(corpus, seed, task, ingest, feat, jobs);
    }
    return featurize_manifest(d.manifest, ingest, feat, jobs);
  });
  in_stage("featurize", log, [&] {
    features::FeatureSet fs_out;
    for (const auto& e : d.manifest.entries) fs_out.clip_paths.push_back(e.clip_path);
    fs_out.specs = d.specs;
    bool uniform = true;
    for (const auto& s : d.specs) {
      uniform = uniform && s.n_mels() == d.specs.front().n_mels() && s.n_frames() == d.specs.front().n_frames();
    }
    if (uniform) features::save_feature_set(fs_out, dir / "features" / "features.bin");
    return 0;
  });
  return d;
}

models::SpecDataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
  models::SpecDataset s;
  for (std::size_t i : idx) {
    s.specs.push_back(d.specs[i]);
    s.labels.push_back(d.labels[i]);
  }
  return s;
}

std::vector<std::string> clip_paths(const Dataset& d, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(d.manifest.entries[i].clip_path);
  return out;
}

models::FeatureRows embedding_rows(const Dataset& d, const std::string& source, const fs::path& out_csv) {
  models::FeatureRows rows;
  if (source == features::kStatsExtractor) {
    std::vector<features::LabeledEmbedding> set;
    for (std::size_t i = 0; i < d.specs.size(); ++i) {
      set.push_back({d.manifest.entries[i].clip_path, features::embed_stats(d.specs[i])});
      rows.push_back(set.back().embedding.values);
    }
    features::save_embeddings(set, out_csv);
    return rows;
  }
  const auto external = features::load_external_embeddings(source);
  std::map<std::string, const std::vector<double>*> by_path;
  for (const auto& e : external) by_path[e.clip_path] = &e.embedding.values;
  for (const auto& e : d.manifest.entries) {
    const auto it = by_path.find(e.clip_path);
    if (it == by_path.end()) throw ConfigError("embeddings file has no row for clip " + e.clip_path);
    rows.push_back(*it->second);
  }
  return rows;
}

std::string grid_csv(const models::GbtFitResult& r) {
  std::ostringstream os;
  os << "n_rounds,max_depth,learning_rate,subsample,cv_accuracy,selected\n";
  for (const auto& s : r.scores) {
    os << s.params.n_rounds << ',' << s.params.max_depth << ',' << text::format_double(s.params.learning_rate) << ','
       << text::format_double(s.params.subsample) << ',' << text::format_double(s.cv_accuracy) << ','
       << (s.params == r.best ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  const fs::path out = cfg.output_dir;
  const fs::path work = out / "partial";
  std::ostream* log = options.log;
  const int jobs = std::max(1, options.jobs);
  fs::create_directories(out);
  clear_previous_run(out);
  fs::remove_all(work);
  fs::create_directories(work);
  last_stage.clear();

  const std::uint64_t master = cfg.seed;
  const std::uint64_t corpus_seed = derive_seed(master, "corpus");
  const std::uint64_t split_seed = derive_seed(master, "split");
  const std::uint64_t cnn_seed = derive_seed(master, "cnn");
  const std::uint64_t train_seed = derive_seed(master, "train");
  const std::uint64_t gbt_seed = derive_seed(master, "gbt");
  const std::uint64_t pretrain_seed = derive_seed(master, "pretrain");

  try {
    const Dataset data =
        build_dataset(cfg.corpus, corpus_seed, cfg.task, cfg.ingest, cfg.features, work, jobs, log);
    const auto names = eval::class_names(cfg.task);

    const auto folds = in_stage("split", log, [&] {
      if (cfg.split == Split::head_holdout) return std::vector<eval::FoldSpec>{eval::head_holdout_split(data.manifest, split_seed)};
      std::vector<int> keys;
      for (const auto& e : data.manifest.entries) keys.push_back(e.round_id);
      return eval::round_robin_folds(keys, data.labels, split_seed);
    });

    std::optional<models::Cnn<float>> pretrained;
    if (cfg.finetune) {
      const auto& ft = *cfg.finetune;
      pretrained = in_stage("pretrain", log, [&]() -> models::Cnn<float> {
        if (ft.checkpoint) return models::load_checkpoint(*ft.checkpoint);
        const fs::path dir = work / "pretrain";
        const Dataset pre = build_dataset(ft.pretrain_corpus, derive_seed(pretrain_seed, "corpus"), ft.pretrain_task,
                                          cfg.ingest, cfg.features, dir, jobs, log);
        std::vector<std::size_t> all(pre.specs.size()), tr, dv;
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        eval::stratified_dev_split(all, pre.labels, 0.2, derive_seed(pretrain_seed, "split"), tr, dv);
        const auto net_cfg = shaped_cnn(cfg.model.cnn, pre.specs.front(), eval::class_names(ft.pretrain_task).size(),
                                        derive_seed(pretrain_seed, "cnn"));
        auto t = ft.pretrain_train;
        t.seed = derive_seed(pretrain_seed, "train");
        t.jobs = jobs;
        auto res = models::train<float>(t, net_cfg, subset(pre, tr), subset(pre, dv));
        models::save_checkpoint(res.model, dir / "model.ckpt");
        models::write_history(res.history, dir / "history.csv");
        if (log) *log << "  pretrain best epoch " << res.history.best_epoch << std::endl;
        return res.model;
      });
    }

    std::string model_name = cfg.model.family;
    if (cfg.finetune) model_name += std::string("-") + models::to_string(cfg.finetune->strategy);

    models::FeatureRows rows;
    if (cfg.model.family == "gbt") {
      rows = in_stage("featurize", log,
                      [&] { return embedding_rows(data, cfg.model.embeddings, work / "features" / "embeddings.csv"); });
    }

    std::vector<eval::FoldMetrics> fold_results;
    eval::PredictionSet pooled;
    pooled.n_classes = names.size();
    pooled.log_probs = cfg.model.family == "cnn";
    for (const auto& fold : folds) {
      const fs::path dir = work / "folds" / fold.name;
      const auto k = static_cast<std::uint64_t>(fold.fold_id);
      std::vector<int> test_labels;
      for (std::size_t i : fold.test) test_labels.push_back(data.labels[i]);
      const auto preds = in_stage("train", log, [&] {
        if (log) {
          *log << "  fold " << fold.name << ": train " << fold.train.size() << ", dev " << fold.dev.size() << ", test "
               << fold.test.size() << std::endl;
        }
        if (cfg.model.family == "cnn") {
          const auto net_cfg = shaped_cnn(cfg.model.cnn, data.specs.front(), names.size(), derive_seed(cnn_seed, {k}));
          auto t = cfg.model.train;
          t.seed = derive_seed(train_seed, {k});
          t.jobs = jobs;
          const auto tr = subset(data, fold.train), dv = subset(data, fold.dev);
          auto res = cfg.finetune ? models::finetune(*pretrained, cfg.finetune->strategy, t, net_cfg, tr, dv)
                                  : models::train<float>(t, net_cfg, tr, dv);
          models::save_checkpoint(res.model, dir / "model.ckpt");
          models::write_history(res.history, dir / "history.csv");
          if (log) *log << "    best epoch " << res.history.best_epoch << std::endl;
          return predict_cnn(res.model, subset(data, fold.test).specs, test_labels, jobs);
        }
        models::FeatureRows x;
        std::vector<int> y;
        for (const auto* part : {&fold.train, &fold.dev}) {
          for (std::size_t i : *part) {
            x.push_back(rows[i]);
            y.push_back(data.labels[i]);
          }
        }
        const auto fit = models::gbt_fit(x, y, names.size(), cfg.model.grid, derive_seed(gbt_seed, {k}), jobs);
        models::save_gbt(fit.model, dir / "model.json");
        text::write_file(dir / "grid.csv", grid_csv(fit));
        models::FeatureRows tx;
        for (std::size_t i : fold.test) tx.push_back(rows[i]);
        return predict_gbt(fit.model, tx, test_labels);
      });
      in_stage("evaluate", log, [&] {
        eval::save_predictions(preds, clip_paths(data, fold.test), names, dir / "predictions.csv");
        fold_results.push_back(eval::fold_metrics(fold.name, preds));
        pooled.append(preds);
        if (log) *log << "    accuracy " << text::format_fixed(fold_results.back().accuracy, 3) << std::endl;
        return 0;
      });
    }

    RunResult result;
    result.report = in_stage("report", log, [&] {
      auto report = eval::aggregate_report(eval::to_string(cfg.task), model_name, names, fold_results, pooled);
      eval::export_report(report, work);
      return report;
    });

    in_stage("report", log, [&] {
      const auto files = list_files(work);
      json fold_info = json::array();
      for (const auto& f : folds) {
        fold_info.push_back({{"name", f.name}, {"train", f.train.size()}, {"dev", f.dev.size()}, {"test", f.test.size()}});
      }
      json record = {{"tool", "scatterbench"},
                     {"version", kVersion},
                     {"schema_version", kSchemaVersion},
                     {"config", to_json(cfg)},
                     {"config_digest", hex64(config_digest(cfg))},
                     {"seeds",
                      {{"master", master},
                       {"corpus", corpus_seed},
                       {"split", split_seed},
                       {"cnn", cnn_seed},
                       {"train", train_seed},
                       {"gbt", gbt_seed},
                       {"pretrain", pretrain_seed}}},
                     {"libraries", {{"fftw", std::string(fftw_version)}, {"nlohmann_json", NLOHMANN_JSON_VERSION_MAJOR * 10000 +
                                                                                    NLOHMANN_JSON_VERSION_MINOR * 100 +
                                                                                    NLOHMANN_JSON_VERSION_PATCH}}},
                     {"folds", fold_info},
                     {"files", files}};
      for (const auto& top : fs::directory_iterator(work)) {
        const fs::path dest = out / top.path().filename();
        fs::remove_all(dest);
        fs::rename(top.path(), dest);
      }
      fs::remove_all(work);
      text::write_file(out / "run.json", record.dump(2) + "\n");
      for (const auto& f : files) result.files.push_back(out / f);
      result.files.push_back(out / "run.json");
      return 0;
    });
    return result;
  } catch (const StageError& e) {
    std::ofstream(work / "error.txt") << "stage=" << e.stage() << " kind=" << e.kind() << " cause=" << e.what()
                                      << "\n";
    throw;
  }
}

}  // namespace scatterbench::experiment

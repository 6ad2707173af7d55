#include "scatterbench/gbt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "scatterbench/core.hpp"
#include "scatterbench/parallel.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/text.hpp"

namespace scatterbench::models {

using nlohmann::json;

void GbtParams::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("gbt params: ") + what);
  };
  need(n_rounds >= 0, "n_rounds must be >= 0");
  need(max_depth >= 1, "max_depth must be >= 1");
  need(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be > 0");
  need(subsample > 0.0 && subsample <= 1.0, "subsample must be in (0, 1]");
  need(lambda >= 0.0 && std::isfinite(lambda), "lambda must be >= 0");
  need(min_child_weight >= 0.0, "min_child_weight must be >= 0");
}

void GbtGrid::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("gbt grid: ") + what);
  };
  need(!n_rounds.empty(), "n_rounds is empty");
  need(!max_depth.empty(), "max_depth is empty");
  need(!learning_rate.empty(), "learning_rate is empty");
  need(!subsample.empty(), "subsample is empty");
  need(cv_folds >= 2, "cv_folds must be >= 2");
  for (const auto& p : points()) p.validate();
}

std::vector<GbtParams> GbtGrid::points() const {
  std::vector<GbtParams> out;
  for (int r : n_rounds)
    for (int d : max_depth)
      for (double lr : learning_rate)
        for (double s : subsample) out.push_back({r, d, lr, s, lambda, min_child_weight});
  return out;
}

double GbtTree::predict(std::span<const double> x) const {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right);
  }
  return nodes[i].value;
}

std::size_t GbtTree::depth() const {
  std::vector<std::size_t> d(nodes.size(), 0);
  std::size_t best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].feature < 0) continue;
    for (int c : {nodes[i].left, nodes[i].right}) {
      d[static_cast<std::size_t>(c)] = d[i] + 1;
      best = std::max(best, d[i] + 1);
    }
  }
  return best;
}

namespace {

void check_inputs(const FeatureRows& x, const std::vector<int>& labels, std::size_t n_classes) {
  if (x.empty()) throw ConfigError("gbt: no training rows");
  if (labels.size() != x.size()) {
    throw ShapeError("gbt: " + std::to_string(x.size()) + " rows but " + std::to_string(labels.size()) + " labels");
  }
  if (n_classes < 2) throw ConfigError("gbt: n_classes must be >= 2");
  const std::size_t d = x.front().size();
  if (d == 0) throw ShapeError("gbt: rows have no features");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != d) {
      throw ShapeError("gbt: row " + std::to_string(i) + " has " + std::to_string(x[i].size()) +
                       " features, expected " + std::to_string(d));
    }
    for (double v : x[i]) {
      if (!std::isfinite(v)) throw FormatError("gbt: non-finite feature in row " + std::to_string(i));
    }
  }
  std::vector<int> seen(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw LabelError("gbt: label " + std::to_string(y) + " at row " + std::to_string(i) + " outside [0, " +
                       std::to_string(n_classes) + ")");
    }
    seen[static_cast<std::size_t>(y)] = 1;
  }
  if (std::accumulate(seen.begin(), seen.end(), 0) < 2) {
    throw DegenerateInputError("gbt: degenerate labels, only class " + std::to_string(labels.front()) +
                               " is present");
  }
}

void softmax_inplace(std::span<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) s += (v = std::exp(v - m));
  for (double& v : z) v /= s;
}

/// Row indices sorted by each feature (ties by row index).
std::vector<std::vector<std::uint32_t>> presort(const FeatureRows& x) {
  const std::size_t n = x.size(), d = x.front().size();
  std::vector<std::vector<std::uint32_t>> order(d, std::vector<std::uint32_t>(n));
  for (std::size_t f = 0; f < d; ++f) {
    auto& o = order[f];
    std::iota(o.begin(), o.end(), 0u);
    std::stable_sort(o.begin(), o.end(), [&](std::uint32_t a, std::uint32_t b) { return x[a][f] < x[b][f]; });
  }
  return order;
}

struct SplitCandidate {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

/// Exact greedy level-wise growth on rows with in_sample set.
GbtTree grow_tree(const FeatureRows& x, const std::vector<std::vector<std::uint32_t>>& order,
                  const std::vector<double>& g, const std::vector<double>& h, const std::vector<char>& in_sample,
                  const GbtParams& p) {
  const std::size_t n = x.size(), d = x.front().size();
  const double lambda = p.lambda;
  auto score = [lambda](double G, double H) { return G * G / (H + lambda); };

  GbtTree tree;
  std::vector<double> G_node{0.0}, H_node{0.0};
  std::vector<int> node_of(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_sample[i]) continue;
    node_of[i] = 0;
    G_node[0] += g[i];
    H_node[0] += h[i];
  }
  tree.nodes.push_back({});
  std::vector<int> frontier{0};

  for (int level = 0; level < p.max_depth && !frontier.empty(); ++level) {
    const std::size_t S = frontier.size();
    std::vector<int> slot(tree.nodes.size(), -1);
    for (std::size_t s = 0; s < S; ++s) slot[static_cast<std::size_t>(frontier[s])] = static_cast<int>(s);
    std::vector<SplitCandidate> best(S);
    std::vector<double> gl(S), hl(S), last(S);
    std::vector<char> has_last(S);
    for (std::size_t f = 0; f < d; ++f) {
      std::fill(gl.begin(), gl.end(), 0.0);
      std::fill(hl.begin(), hl.end(), 0.0);
      std::fill(has_last.begin(), has_last.end(), 0);
      for (std::uint32_t row : order[f]) {
        const int nd = node_of[row];
        if (nd < 0) continue;
        const int si = slot[static_cast<std::size_t>(nd)];
        if (si < 0) continue;
        const auto s = static_cast<std::size_t>(si);
        const double v = x[row][f];
        if (has_last[s] && v > last[s]) {
          const double G = G_node[static_cast<std::size_t>(nd)], H = H_node[static_cast<std::size_t>(nd)];
          const double gr = G - gl[s], hr = H - hl[s];
          if (hl[s] >= p.min_child_weight && hr >= p.min_child_weight) {
            const double gain = score(gl[s], hl[s]) + score(gr, hr) - score(G, H);
            if (gain > best[s].gain + 1e-12) {
              double thr = 0.5 * (last[s] + v);
              if (!(thr > last[s])) thr = v;
              best[s] = {gain, static_cast<int>(f), thr};
            }
          }
        }
        gl[s] += g[row];
        hl[s] += h[row];
        last[s] = v;
        has_last[s] = 1;
      }
    }
    std::vector<int> next;
    for (std::size_t s = 0; s < S; ++s) {
      if (best[s].feature < 0) continue;
      const auto nd = static_cast<std::size_t>(frontier[s]);
      const int left = static_cast<int>(tree.nodes.size());
      tree.nodes.push_back({});
      tree.nodes.push_back({});
      G_node.resize(tree.nodes.size(), 0.0);
      H_node.resize(tree.nodes.size(), 0.0);
      tree.nodes[nd].feature = best[s].feature;
      tree.nodes[nd].threshold = best[s].threshold;
      tree.nodes[nd].left = left;
      tree.nodes[nd].right = left + 1;
      next.push_back(left);
      next.push_back(left + 1);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const int nd = node_of[i];
      if (nd < 0) continue;
      const auto& node = tree.nodes[static_cast<std::size_t>(nd)];
      if (node.feature < 0) continue;
      const int child = x[i][static_cast<std::size_t>(node.feature)] < node.threshold ? node.left : node.right;
      node_of[i] = child;
      G_node[static_cast<std::size_t>(child)] += g[i];
      H_node[static_cast<std::size_t>(child)] += h[i];
    }
    frontier = std::move(next);
  }
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    tree.nodes[i].value = -p.learning_rate * G_node[i] / (H_node[i] + lambda);
  }
  return tree;
}

std::vector<char> draw_subsample(std::size_t n, double fraction, std::uint64_t seed) {
  std::vector<char> mask(n, 1);
  if (fraction >= 1.0) return mask;
  const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + std::min(n - i - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  std::fill(mask.begin(), mask.end(), 0);
  for (std::size_t i = 0; i < m; ++i) mask[idx[i]] = 1;
  return mask;
}

}  // namespace

GbtModel gbt_train(const FeatureRows& x, const std::vector<int>& labels, std::size_t n_classes,
                   const GbtParams& params, std::uint64_t seed) {
  params.validate();
  check_inputs(x, labels, n_classes);
  const std::size_t n = x.size(), K = n_classes;
  GbtModel model;
  model.n_features = x.front().size();
  model.n_classes = K;
  model.params = params;
  const auto order = presort(x);
  std::vector<double> margin(n * K, 0.0), prob(n * K);
  std::vector<double> g(n), h(n);
  for (int round = 0; round < params.n_rounds; ++round) {
    prob = margin;
    for (std::size_t i = 0; i < n; ++i) softmax_inplace(std::span<double>(prob).subspan(i * K, K));
    const auto mask = draw_subsample(n, params.subsample, derive_seed(seed, {static_cast<std::uint64_t>(round)}));
    std::vector<GbtTree> trees(K);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        const double pk = prob[i * K + k];
        g[i] = pk - (static_cast<std::size_t>(labels[i]) == k ? 1.0 : 0.0);
        h[i] = std::max(pk * (1.0 - pk), 1e-16);
      }
      trees[k] = grow_tree(x, order, g, h, mask, params);
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < K; ++k) margin[i * K + k] += trees[k].predict(x[i]);
    }
    model.trees.push_back(std::move(trees));
  }
  return model;
}

std::vector<double> gbt_margins(const GbtModel& model, std::span<const double> x, std::size_t rounds) {
  if (x.size() != model.n_features) {
    throw ShapeError("gbt: input has " + std::to_string(x.size()) + " features, model expects " +
                     std::to_string(model.n_features));
  }
  std::vector<double> z(model.n_classes, 0.0);
  const std::size_t R = std::min(rounds, model.trees.size());
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t k = 0; k < model.n_classes; ++k) z[k] += model.trees[r][k].predict(x);
  }
  return z;
}

std::vector<double> gbt_predict(const GbtModel& model, std::span<const double> x) {
  auto z = gbt_margins(model, x);
  softmax_inplace(z);
  return z;
}

int gbt_predict_label(const GbtModel& model, std::span<const double> x) {
  const auto z = gbt_margins(model, x);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

std::vector<double> gbt_staged_loss(const GbtModel& model, const FeatureRows& x, const std::vector<int>& labels) {
  if (labels.size() != x.size()) throw ShapeError("gbt: rows and labels differ in count");
  const std::size_t K = model.n_classes;
  std::vector<std::vector<double>> z(x.size(), std::vector<double>(K, 0.0));
  std::vector<double> out;
  auto loss_now = [&] {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double m = *std::max_element(z[i].begin(), z[i].end());
      double s = 0.0;
      for (double v : z[i]) s += std::exp(v - m);
      acc += m + std::log(s) - z[i][static_cast<std::size_t>(labels[i])];
    }
    return acc / static_cast<double>(x.size());
  };
  out.push_back(loss_now());
  for (const auto& round : model.trees) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].size() != model.n_features) throw ShapeError("gbt: row width does not match the model");
      for (std::size_t k = 0; k < K; ++k) z[i][k] += round[k].predict(x[i]);
    }
    out.push_back(loss_now());
  }
  return out;
}

std::vector<int> stratified_folds(const std::vector<int>& labels, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified folds: k must be >= 2");
  std::vector<int> fold(labels.size(), 0);
  std::vector<int> classes(labels);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  Rng rng(seed);
  int offset = 0;
  for (int c : classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(i);
    }
    for (std::size_t i = members.size(); i > 1; --i) {
      const auto j = std::min(i - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)));
      std::swap(members[i - 1], members[j]);
    }
    // Continue the cycle across classes so small classes do not all land
    // in fold 0.
    for (std::size_t i = 0; i < members.size(); ++i) {
      fold[members[i]] = static_cast<int>((static_cast<std::size_t>(offset) + i) % static_cast<std::size_t>(k));
    }
    offset = static_cast<int>((static_cast<std::size_t>(offset) + members.size()) % static_cast<std::size_t>(k));
  }
  return fold;
}

GbtFitResult gbt_fit(const FeatureRows& x, const std::vector<int>& labels, std::size_t n_classes,
                     const GbtGrid& grid, std::uint64_t seed, int jobs) {
  grid.validate();
  check_inputs(x, labels, n_classes);
  const auto points = grid.points();
  const int K = grid.cv_folds;
  const auto fold = stratified_folds(labels, K, derive_seed(seed, "cv"));

  // One fit per (depth, lr, subsample) at the largest round count serves
  // every round count in the grid, since earlier rounds never look ahead.
  struct Group {
    int depth;
    double lr, subsample;
    int max_rounds = 0;
  };
  std::vector<Group> groups;
  std::vector<std::size_t> group_of(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    std::size_t gi = 0;
    while (gi < groups.size() &&
           !(groups[gi].depth == p.max_depth && groups[gi].lr == p.learning_rate &&
             groups[gi].subsample == p.subsample)) {
      ++gi;
    }
    if (gi == groups.size()) groups.push_back({p.max_depth, p.learning_rate, p.subsample});
    groups[gi].max_rounds = std::max(groups[gi].max_rounds, p.n_rounds);
    group_of[i] = gi;
  }

  // accuracy[task][r] for r = 0..max_rounds; task = group * K + fold.
  std::vector<std::vector<double>> staged(groups.size() * static_cast<std::size_t>(K));
  parallel_for(staged.size(), jobs, [&](std::size_t task) {
    const auto& gr = groups[task / static_cast<std::size_t>(K)];
    const int f = static_cast<int>(task % static_cast<std::size_t>(K));
    FeatureRows tx, vx;
    std::vector<int> ty, vy;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (fold[i] == f) {
        vx.push_back(x[i]);
        vy.push_back(labels[i]);
      } else {
        tx.push_back(x[i]);
        ty.push_back(labels[i]);
      }
    }
    auto& acc = staged[task];
    acc.assign(static_cast<std::size_t>(gr.max_rounds) + 1, 0.0);
    if (vx.empty()) return;
    GbtParams p{gr.max_rounds, gr.depth, gr.lr, gr.subsample, grid.lambda, grid.min_child_weight};
    GbtModel m;
    try {
      m = gbt_train(tx, ty, n_classes, p, derive_seed(seed, {static_cast<std::uint64_t>(f)}));
    } catch (const DegenerateInputError&) {
      // A training fold with one class predicts that class everywhere.
      const double hit = static_cast<double>(std::count(vy.begin(), vy.end(), ty.front()));
      std::fill(acc.begin(), acc.end(), hit / static_cast<double>(vy.size()));
      return;
    }
    std::vector<std::vector<double>> z(vx.size(), std::vector<double>(n_classes, 0.0));
    for (std::size_t r = 0; r <= m.trees.size(); ++r) {
      if (r > 0) {
        for (std::size_t i = 0; i < vx.size(); ++i)
          for (std::size_t k = 0; k < n_classes; ++k) z[i][k] += m.trees[r - 1][k].predict(vx[i]);
      }
      std::size_t correct = 0;
      for (std::size_t i = 0; i < vx.size(); ++i) {
        const auto arg = std::max_element(z[i].begin(), z[i].end()) - z[i].begin();
        if (arg == vy[i]) ++correct;
      }
      acc[r] = static_cast<double>(correct) / static_cast<double>(vx.size());
    }
  });

  GbtFitResult result;
  std::size_t best = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double sum = 0.0;
    int used = 0;
    for (int f = 0; f < K; ++f) {
      if (std::find(fold.begin(), fold.end(), f) == fold.end()) continue;
      sum += staged[group_of[i] * static_cast<std::size_t>(K) + static_cast<std::size_t>(f)]
                   [static_cast<std::size_t>(points[i].n_rounds)];
      ++used;
    }
    const double score = sum / static_cast<double>(used);
    result.scores.push_back({points[i], score});
    if (i == 0) continue;
    const auto& b = result.scores[best];
    const auto& c = result.scores[i];
    const bool better =
        c.cv_accuracy > b.cv_accuracy ||
        (c.cv_accuracy == b.cv_accuracy &&
         (c.params.n_rounds < b.params.n_rounds ||
          (c.params.n_rounds == b.params.n_rounds && c.params.max_depth < b.params.max_depth)));
    if (better) best = i;
  }
  result.best = points[best];
  result.model = gbt_train(x, labels, n_classes, result.best, derive_seed(seed, "refit"));
  return result;
}

// --- serialization -------------------------------------------------------

namespace {

json params_json(const GbtParams& p) {
  return {{"n_rounds", p.n_rounds},
          {"max_depth", p.max_depth},
          {"learning_rate", p.learning_rate},
          {"subsample", p.subsample},
          {"lambda", p.lambda},
          {"min_child_weight", p.min_child_weight}};
}

}  // namespace

void save_gbt(const GbtModel& model, const std::filesystem::path& path) {
  json trees = json::array();
  for (const auto& round : model.trees) {
    json r = json::array();
    for (const auto& t : round) {
      json nodes = json::array();
      for (const auto& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
      r.push_back(std::move(nodes));
    }
    trees.push_back(std::move(r));
  }
  json j = {{"format", "scatterbench-gbt"},
            {"version", 1},
            {"n_features", model.n_features},
            {"n_classes", model.n_classes},
            {"params", params_json(model.params)},
            {"trees", std::move(trees)}};
  text::write_file(path, j.dump() + "\n");
}

GbtModel load_gbt(const std::filesystem::path& path) {
  const std::string where = path.string();
  json j;
  try {
    j = json::parse(text::read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  try {
    if (j.at("format") != "scatterbench-gbt") throw FormatError(where + ": not a gbt model");
    if (j.at("version") != 1) throw FormatError(where + ": unsupported gbt model version");
    GbtModel m;
    m.n_features = j.at("n_features").get<std::size_t>();
    m.n_classes = j.at("n_classes").get<std::size_t>();
    const auto& p = j.at("params");
    m.params = {p.at("n_rounds").get<int>(),          p.at("max_depth").get<int>(),
                p.at("learning_rate").get<double>(),  p.at("subsample").get<double>(),
                p.at("lambda").get<double>(),         p.at("min_child_weight").get<double>()};
    for (const auto& r : j.at("trees")) {
      std::vector<GbtTree> round;
      for (const auto& t : r) {
        GbtTree tree;
        for (const auto& n : t) {
          tree.nodes.push_back({n.at(0).get<int>(), n.at(1).get<double>(), n.at(2).get<int>(), n.at(3).get<int>(),
                                n.at(4).get<double>()});
        }
        const auto count = static_cast<int>(tree.nodes.size());
        if (count == 0) throw FormatError(where + ": empty tree");
        for (const auto& n : tree.nodes) {
          if (n.feature >= static_cast<int>(m.n_features) ||
              (n.feature >= 0 && (n.left <= 0 || n.left >= count || n.right <= 0 || n.right >= count))) {
            throw FormatError(where + ": malformed tree node");
          }
        }
        round.push_back(std::move(tree));
      }
      if (round.size() != m.n_classes) throw FormatError(where + ": round has wrong number of trees");
      m.trees.push_back(std::move(round));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
}

GbtGrid load_grid(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(text::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": grid must be a JSON object");
  GbtGrid g;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    try {
      if (key == "n_rounds") g.n_rounds = it->get<std::vector<int>>();
      else if (key == "max_depth") g.max_depth = it->get<std::vector<int>>();
      else if (key == "learning_rate") g.learning_rate = it->get<std::vector<double>>();
      else if (key == "subsample") g.subsample = it->get<std::vector<double>>();
      else if (key == "lambda") g.lambda = it->get<double>();
      else if (key == "min_child_weight") g.min_child_weight = it->get<double>();
      else if (key == "cv_folds") g.cv_folds = it->get<int>();
      else throw ConfigError(path.string() + ": unknown grid field '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ": field '" + key + "': " + e.what());
    }
  }
  g.validate();
  return g;
}

}  // namespace scatterbench::models

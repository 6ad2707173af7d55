#include "scatterbench/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <sstream>

#include "scatterbench/binio.hpp"
#include "scatterbench/parallel.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/text.hpp"

namespace scatterbench::models {
namespace {

struct ConvGeom {
  std::size_t ci, co, k, s, p, hi, wi, ho, wo;
  std::size_t kk() const { return ci * k * k; }
  std::size_t positions() const { return ho * wo; }
};

struct PoolGeom {
  std::size_t c, hi, wi, ho, wo;
};

struct BlockPlan {
  ConvGeom conv1, conv2;
  bool project = false;
  ConvGeom proj{};
  std::size_t w1, b1, w2, b2, wp = 0, bp = 0;  // parameter indices
};

struct Plan {
  ConvGeom stem;
  bool pool = false;
  PoolGeom pool_geom{};
  std::vector<BlockPlan> blocks;
  std::size_t features = 0;
  std::size_t stem_w = 0, stem_b = 1, head_w = 0, head_b = 0;
};

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p, const std::string& where) {
  if (in + 2 * p < k) {
    throw ConfigError(where + ": input extent " + std::to_string(in) + " with padding " +
                      std::to_string(p) + " is smaller than kernel " + std::to_string(k));
  }
  return (in + 2 * p - k) / s + 1;
}

ConvGeom make_conv(std::size_t ci, std::size_t co, std::size_t k, std::size_t s, std::size_t p,
                   std::size_t h, std::size_t w, const std::string& where) {
  return {ci, co, k, s, p, h, w, conv_out(h, k, s, p, where), conv_out(w, k, s, p, where)};
}

Plan make_plan(const CnnConfig& c) {
  if (c.n_classes < 2) throw ConfigError("cnn: n_classes must be >= 2");
  if (c.in_mels < 1 || c.in_frames < 1) throw ConfigError("cnn: input shape must be non-empty");
  if (c.stem_channels < 1 || c.stem_kernel < 1 || c.stem_stride < 1) {
    throw ConfigError("cnn: stem channels, kernel and stride must be >= 1");
  }
  Plan plan;
  plan.stem = make_conv(1, c.stem_channels, c.stem_kernel, c.stem_stride, c.stem_padding, c.in_mels,
                        c.in_frames, "stem");
  std::size_t ch = c.stem_channels, h = plan.stem.ho, w = plan.stem.wo;
  std::size_t idx = 2;
  if (c.stem_pool) {
    plan.pool = true;
    plan.pool_geom = {ch, h, w, conv_out(h, 3, 2, 1, "stem pool"), conv_out(w, 3, 2, 1, "stem pool")};
    h = plan.pool_geom.ho;
    w = plan.pool_geom.wo;
  }
  for (std::size_t b = 0; b < c.blocks.size(); ++b) {
    const auto& spec = c.blocks[b];
    const std::string where = "block " + std::to_string(b);
    if (spec.channels < 1 || spec.stride < 1) throw ConfigError(where + ": channels and stride must be >= 1");
    BlockPlan bp;
    bp.conv1 = make_conv(ch, spec.channels, 3, spec.stride, 1, h, w, where + " conv1");
    bp.conv2 = make_conv(spec.channels, spec.channels, 3, 1, 1, bp.conv1.ho, bp.conv1.wo, where + " conv2");
    bp.w1 = idx++;
    bp.b1 = idx++;
    bp.w2 = idx++;
    bp.b2 = idx++;
    if (ch != spec.channels || spec.stride != 1) {
      bp.project = true;
      bp.proj = make_conv(ch, spec.channels, 1, spec.stride, 0, h, w, where + " proj");
      if (bp.proj.ho != bp.conv2.ho || bp.proj.wo != bp.conv2.wo) {
        throw ConfigError(where + ": projection shape does not match residual branch");
      }
      bp.wp = idx++;
      bp.bp = idx++;
    }
    ch = spec.channels;
    h = bp.conv2.ho;
    w = bp.conv2.wo;
    plan.blocks.push_back(bp);
  }
  plan.features = ch;
  plan.head_w = idx++;
  plan.head_b = idx++;
  return plan;
}

// C(M x N) += A(M x K) B(K x N)
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T(0)) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C(M x K) += A(M x N) B(K x N)^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      T acc = 0;
      for (std::size_t j = 0; j < N; ++j) acc += a[j] * b[j];
      C[i * K + k] += acc;
    }
  }
}

// C(K x N) += A(M x K)^T B(M x N)
template <typename T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* b = B + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T(0)) continue;
      T* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

template <typename T>
void im2col(const ConvGeom& g, const T* in, T* col) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long long y = static_cast<long long>(oy * g.s + ky) - static_cast<long long>(g.p);
          T* dst = row + oy * g.wo;
          if (y < 0 || y >= static_cast<long long>(g.hi)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = in + (c * g.hi + static_cast<std::size_t>(y)) * g.wi;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long long x = static_cast<long long>(ox * g.s + kx) - static_cast<long long>(g.p);
            dst[ox] = (x < 0 || x >= static_cast<long long>(g.wi)) ? T(0) : src[x];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeom& g, const T* col, T* din) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long long y = static_cast<long long>(oy * g.s + ky) - static_cast<long long>(g.p);
          if (y < 0 || y >= static_cast<long long>(g.hi)) continue;
          T* dst = din + (c * g.hi + static_cast<std::size_t>(y)) * g.wi;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long long x = static_cast<long long>(ox * g.s + kx) - static_cast<long long>(g.p);
            if (x >= 0 && x < static_cast<long long>(g.wi)) dst[x] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

template <typename T>
struct ConvCache {
  std::vector<T> col;
};

template <typename T>
void conv_forward(const ConvGeom& g, const T* in, const std::vector<T>& w, const std::vector<T>& b,
                  std::vector<T>& out, ConvCache<T>& cache) {
  const std::size_t P = g.positions(), K = g.kk();
  cache.col.resize(K * P);
  im2col(g, in, cache.col.data());
  out.assign(g.co * P, T(0));
  for (std::size_t o = 0; o < g.co; ++o) std::fill(out.begin() + o * P, out.begin() + (o + 1) * P, b[o]);
  gemm_nn(g.co, P, K, w.data(), cache.col.data(), out.data());
}

// Accumulates dw, db and (when din != nullptr) din.
template <typename T>
void conv_backward(const ConvGeom& g, const T* dout, const std::vector<T>& w, const ConvCache<T>& cache,
                   std::vector<T>& dw, std::vector<T>& db, T* din) {
  const std::size_t P = g.positions(), K = g.kk();
  for (std::size_t o = 0; o < g.co; ++o) {
    T acc = 0;
    for (std::size_t j = 0; j < P; ++j) acc += dout[o * P + j];
    db[o] += acc;
  }
  gemm_nt(g.co, K, P, dout, cache.col.data(), dw.data());
  if (din != nullptr) {
    std::vector<T> dcol(K * P, T(0));
    gemm_tn(g.co, K, P, w.data(), dout, dcol.data());
    col2im(g, dcol.data(), din);
  }
}

template <typename T>
void relu_inplace(std::vector<T>& x) {
  for (T& v : x) v = v > T(0) ? v : T(0);
}

template <typename T>
struct BlockCache {
  ConvCache<T> c1, c2, cp;
  std::vector<T> input, pre1, act1, skip, sum, out;
};

template <typename T>
struct Trace {
  std::vector<T> input;
  ConvCache<T> stem;
  std::vector<T> stem_pre, stem_act;
  std::vector<std::size_t> pool_arg;
  std::vector<T> pooled;
  std::vector<BlockCache<T>> blocks;
  std::vector<T> features, logits, log_probs;
};

template <typename T>
void log_softmax(const std::vector<T>& logits, std::vector<T>& out) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  T s = 0;
  for (T z : logits) s += std::exp(z - mx);
  const T lse = mx + std::log(s);
  out.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

template <typename T>
void run_forward(const Plan& plan, const std::vector<Param<T>>& P, std::span<const T> input, Trace<T>& tr) {
  tr.input.assign(input.begin(), input.end());
  conv_forward(plan.stem, tr.input.data(), P[plan.stem_w].value, P[plan.stem_b].value, tr.stem_pre, tr.stem);
  tr.stem_act = tr.stem_pre;
  relu_inplace(tr.stem_act);
  const std::vector<T>* cur = &tr.stem_act;
  if (plan.pool) {
    const auto& g = plan.pool_geom;
    tr.pooled.assign(g.c * g.ho * g.wo, T(0));
    tr.pool_arg.assign(tr.pooled.size(), 0);
    for (std::size_t c = 0; c < g.c; ++c) {
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        for (std::size_t ox = 0; ox < g.wo; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t arg = 0;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const long long y = static_cast<long long>(oy * 2 + ky) - 1;
            if (y < 0 || y >= static_cast<long long>(g.hi)) continue;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long long x = static_cast<long long>(ox * 2 + kx) - 1;
              if (x < 0 || x >= static_cast<long long>(g.wi)) continue;
              const std::size_t i = (c * g.hi + static_cast<std::size_t>(y)) * g.wi + static_cast<std::size_t>(x);
              if (tr.stem_act[i] > best) {
                best = tr.stem_act[i];
                arg = i;
              }
            }
          }
          const std::size_t o = (c * g.ho + oy) * g.wo + ox;
          tr.pooled[o] = best;
          tr.pool_arg[o] = arg;
        }
      }
    }
    cur = &tr.pooled;
  }
  tr.blocks.resize(plan.blocks.size());
  for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
    const auto& bp = plan.blocks[b];
    auto& bc = tr.blocks[b];
    bc.input = *cur;
    conv_forward(bp.conv1, bc.input.data(), P[bp.w1].value, P[bp.b1].value, bc.pre1, bc.c1);
    bc.act1 = bc.pre1;
    relu_inplace(bc.act1);
    conv_forward(bp.conv2, bc.act1.data(), P[bp.w2].value, P[bp.b2].value, bc.sum, bc.c2);
    if (bp.project) {
      conv_forward(bp.proj, bc.input.data(), P[bp.wp].value, P[bp.bp].value, bc.skip, bc.cp);
    } else {
      bc.skip = bc.input;
    }
    for (std::size_t i = 0; i < bc.sum.size(); ++i) bc.sum[i] += bc.skip[i];
    bc.out = bc.sum;
    relu_inplace(bc.out);
    cur = &bc.out;
  }
  const std::size_t C = plan.features;
  const std::size_t HW = cur->size() / C;
  tr.features.assign(C, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    T acc = 0;
    for (std::size_t i = 0; i < HW; ++i) acc += (*cur)[c * HW + i];
    tr.features[c] = acc / static_cast<T>(HW);
  }
  const auto& hw = P[plan.head_w].value;
  const auto& hb = P[plan.head_b].value;
  const std::size_t n_cls = hb.size();
  tr.logits.assign(n_cls, T(0));
  for (std::size_t k = 0; k < n_cls; ++k) {
    T acc = hb[k];
    for (std::size_t c = 0; c < C; ++c) acc += hw[k * C + c] * tr.features[c];
    tr.logits[k] = acc;
  }
  log_softmax(tr.logits, tr.log_probs);
}

template <typename T>
void run_backward(const Plan& plan, const std::vector<Param<T>>& P, const Trace<T>& tr, int label, T scale,
                  Gradients<T>& G) {
  const std::size_t n_cls = tr.logits.size();
  const std::size_t C = plan.features;
  std::vector<T> dlogits(n_cls);
  for (std::size_t k = 0; k < n_cls; ++k) {
    dlogits[k] = scale * (std::exp(tr.log_probs[k]) - (static_cast<int>(k) == label ? T(1) : T(0)));
  }
  const auto& hw = P[plan.head_w].value;
  std::vector<T> dfeat(C, T(0));
  for (std::size_t k = 0; k < n_cls; ++k) {
    G[plan.head_b][k] += dlogits[k];
    for (std::size_t c = 0; c < C; ++c) {
      G[plan.head_w][k * C + c] += dlogits[k] * tr.features[c];
      dfeat[c] += dlogits[k] * hw[k * C + c];
    }
  }
  const std::vector<T>& last = plan.blocks.empty() ? (plan.pool ? tr.pooled : tr.stem_act) : tr.blocks.back().out;
  const std::size_t HW = last.size() / C;
  std::vector<T> grad(last.size());
  for (std::size_t c = 0; c < C; ++c) {
    const T g = dfeat[c] / static_cast<T>(HW);
    std::fill(grad.begin() + c * HW, grad.begin() + (c + 1) * HW, g);
  }
  for (std::size_t b = plan.blocks.size(); b-- > 0;) {
    const auto& bp = plan.blocks[b];
    const auto& bc = tr.blocks[b];
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (!(bc.sum[i] > T(0))) grad[i] = T(0);
    }
    std::vector<T> dinput(bc.input.size(), T(0));
    std::vector<T> dact1(bc.act1.size(), T(0));
    conv_backward(bp.conv2, grad.data(), P[bp.w2].value, bc.c2, G[bp.w2], G[bp.b2], dact1.data());
    if (bp.project) {
      conv_backward(bp.proj, grad.data(), P[bp.wp].value, bc.cp, G[bp.wp], G[bp.bp], dinput.data());
    } else {
      for (std::size_t i = 0; i < grad.size(); ++i) dinput[i] += grad[i];
    }
    for (std::size_t i = 0; i < dact1.size(); ++i) {
      if (!(bc.pre1[i] > T(0))) dact1[i] = T(0);
    }
    conv_backward(bp.conv1, dact1.data(), P[bp.w1].value, bc.c1, G[bp.w1], G[bp.b1], dinput.data());
    grad = std::move(dinput);
  }
  std::vector<T> dstem(tr.stem_act.size(), T(0));
  if (plan.pool) {
    for (std::size_t o = 0; o < grad.size(); ++o) dstem[tr.pool_arg[o]] += grad[o];
  } else {
    dstem = grad;
  }
  for (std::size_t i = 0; i < dstem.size(); ++i) {
    if (!(tr.stem_pre[i] > T(0))) dstem[i] = T(0);
  }
  conv_backward<T>(plan.stem, dstem.data(), P[plan.stem_w].value, tr.stem, G[plan.stem_w], G[plan.stem_b],
                   nullptr);
}

void init_normal(std::vector<double>& v, Rng& rng, double sd) {
  for (double& x : v) x = sd * standard_normal(rng);
}

}  // namespace

void CnnConfig::validate() const { make_plan(*this); }

std::size_t CnnConfig::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : Cnn<float>(*this).params()) n += p.value.size();
  return n;
}

std::string CnnConfig::serialize() const {
  std::ostringstream os;
  os << "cnn-v1 in=" << in_mels << 'x' << in_frames << " stem=" << stem_channels << ',' << stem_kernel << ','
     << stem_stride << ',' << stem_padding << ',' << (stem_pool ? 1 : 0) << " blocks=";
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) os << ';';
    os << blocks[i].channels << '/' << blocks[i].stride;
  }
  os << " classes=" << n_classes << " seed=" << init_seed
     << " rscale=" << text::format_double(residual_init_scale);
  return os.str();
}

CnnConfig CnnConfig::parse(const std::string& s) {
  CnnConfig c;
  std::istringstream is(s);
  std::string tok;
  is >> tok;
  if (tok != "cnn-v1") throw FormatError("cnn config: unknown header '" + tok + "'");
  auto num = [](const std::string& v) { return static_cast<std::size_t>(text::parse_int(v, "cnn config")); };
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("cnn config: bad token '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "in") {
      const auto x = val.find('x');
      c.in_mels = num(val.substr(0, x));
      c.in_frames = num(val.substr(x + 1));
    } else if (key == "stem") {
      const auto f = text::split_csv(val);
      if (f.size() != 5) throw FormatError("cnn config: stem needs 5 fields");
      c.stem_channels = num(f[0]);
      c.stem_kernel = num(f[1]);
      c.stem_stride = num(f[2]);
      c.stem_padding = num(f[3]);
      c.stem_pool = f[4] == "1";
    } else if (key == "blocks") {
      c.blocks.clear();
      std::size_t start = 0;
      while (start < val.size()) {
        const auto end = std::min(val.find(';', start), val.size());
        const std::string spec = val.substr(start, end - start);
        const auto slash = spec.find('/');
        if (slash == std::string::npos) throw FormatError("cnn config: bad block '" + spec + "'");
        c.blocks.push_back({num(spec.substr(0, slash)), num(spec.substr(slash + 1))});
        start = end + 1;
      }
    } else if (key == "classes") {
      c.n_classes = num(val);
    } else if (key == "seed") {
      c.init_seed = std::stoull(val);
    } else if (key == "rscale") {
      c.residual_init_scale = text::parse_double(val, "cnn config rscale");
    } else {
      throw FormatError("cnn config: unknown key '" + key + "'");
    }
  }
  return c;
}

template <typename T>
Cnn<T>::Cnn(CnnConfig config) : config_(std::move(config)) {
  const Plan plan = make_plan(config_);
  Rng rng(derive_seed(config_.init_seed, "cnn-init"));
  auto add = [&](std::string name, std::vector<std::size_t> shape, double sd) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n, 0.0);
    if (sd > 0) init_normal(v, rng, sd);
    params_.push_back({std::move(name), std::move(shape), std::vector<T>(v.begin(), v.end())});
  };
  auto add_conv = [&](const std::string& prefix, const ConvGeom& g, double gain) {
    add(prefix + ".weight", {g.co, g.ci, g.k, g.k}, gain * std::sqrt(2.0 / static_cast<double>(g.kk())));
    add(prefix + ".bias", {g.co}, 0.0);
  };
  add_conv("stem", plan.stem, 1.0);
  for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
    const auto& bp = plan.blocks[b];
    const std::string pre = "blocks." + std::to_string(b);
    add_conv(pre + ".conv1", bp.conv1, 1.0);
    add_conv(pre + ".conv2", bp.conv2, config_.residual_init_scale);
    if (bp.project) add_conv(pre + ".proj", bp.proj, 1.0);
  }
  add("head.weight", {config_.n_classes, plan.features}, 1.0 / std::sqrt(static_cast<double>(plan.features)));
  add("head.bias", {config_.n_classes}, 0.0);
}

template <typename T>
Param<T>& Cnn<T>::param(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw UsageError("cnn: no parameter named " + name);
}

template <typename T>
const Param<T>& Cnn<T>::param(const std::string& name) const {
  return const_cast<Cnn<T>*>(this)->param(name);
}

template <typename T>
Gradients<T> Cnn<T>::zero_gradients() const {
  Gradients<T> g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.emplace_back(p.value.size(), T(0));
  return g;
}

template <typename T>
std::vector<T> Cnn<T>::forward(std::span<const T> input) const {
  if (input.size() != input_size()) {
    throw ShapeError("cnn: input has " + std::to_string(input.size()) + " values, expected " +
                     std::to_string(config_.in_mels) + " x " + std::to_string(config_.in_frames));
  }
  const Plan plan = make_plan(config_);
  Trace<T> tr;
  run_forward(plan, params_, input, tr);
  return tr.log_probs;
}

template <typename T>
T Cnn<T>::forward_backward(std::span<const T> input, int label, Gradients<T>& grads, T scale) const {
  if (input.size() != input_size()) {
    throw ShapeError("cnn: input has " + std::to_string(input.size()) + " values, expected " +
                     std::to_string(config_.in_mels) + " x " + std::to_string(config_.in_frames));
  }
  if (label < 0 || static_cast<std::size_t>(label) >= config_.n_classes) {
    throw LabelError("cnn: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(config_.n_classes) + ")");
  }
  if (grads.size() != params_.size()) throw ShapeError("cnn: gradient layout mismatch");
  const Plan plan = make_plan(config_);
  Trace<T> tr;
  run_forward(plan, params_, input, tr);
  run_backward(plan, params_, tr, label, scale, grads);
  return -tr.log_probs[static_cast<std::size_t>(label)];
}

template <typename T>
template <typename U>
Cnn<U> Cnn<T>::cast() const {
  Cnn<U> out(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.params_[i].value.assign(params_[i].value.begin(), params_[i].value.end());
  }
  return out;
}

template class Cnn<float>;
template class Cnn<double>;
template Cnn<double> Cnn<float>::cast<double>() const;
template Cnn<float> Cnn<double>::cast<float>() const;
template Cnn<float> Cnn<float>::cast<float>() const;
template Cnn<double> Cnn<double>::cast<double>() const;

template <typename T>
T nll_loss(const std::vector<std::vector<T>>& log_probs, const std::vector<int>& labels) {
  if (log_probs.size() != labels.size()) throw ShapeError("nll_loss: batch size mismatch");
  if (log_probs.empty()) throw ShapeError("nll_loss: empty batch");
  T acc = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= log_probs[i].size()) {
      throw LabelError("nll_loss: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(log_probs[i].size()) + ")");
    }
    acc -= log_probs[i][static_cast<std::size_t>(labels[i])];
  }
  return acc / static_cast<T>(labels.size());
}

template float nll_loss(const std::vector<std::vector<float>>&, const std::vector<int>&);
template double nll_loss(const std::vector<std::vector<double>>&, const std::vector<int>&);

template <typename T>
std::vector<T> to_input(const features::MelSpectrogram& spec, const CnnConfig& cfg) {
  if (spec.n_mels() != cfg.in_mels || spec.n_frames() != cfg.in_frames) {
    throw ShapeError("cnn: spectrogram is " + std::to_string(spec.n_mels()) + " x " +
                     std::to_string(spec.n_frames()) + ", network expects " + std::to_string(cfg.in_mels) +
                     " x " + std::to_string(cfg.in_frames));
  }
  return std::vector<T>(spec.values.values.begin(), spec.values.values.end());
}

template std::vector<float> to_input(const features::MelSpectrogram&, const CnnConfig&);
template std::vector<double> to_input(const features::MelSpectrogram&, const CnnConfig&);

template <typename T>
std::vector<std::vector<T>> predict_log_probs(const Cnn<T>& net, const std::vector<features::MelSpectrogram>& specs,
                                              int jobs) {
  std::vector<std::vector<T>> out(specs.size());
  parallel_for(specs.size(), jobs, [&](std::size_t i) {
    const auto x = to_input<T>(specs[i], net.config());
    out[i] = net.forward(x);
  });
  return out;
}

template std::vector<std::vector<float>> predict_log_probs(const Cnn<float>&,
                                                           const std::vector<features::MelSpectrogram>&, int);
template std::vector<std::vector<double>> predict_log_probs(const Cnn<double>&,
                                                            const std::vector<features::MelSpectrogram>&, int);

template <typename T>
double grad_check(const CnnConfig& cfg, std::uint64_t seed, const GradCheckOptions& opt) {
  Cnn<T> net(cfg);
  Rng rng(derive_seed(seed, "grad-check"));
  // Perturb biases away from zero so ReLUs are not all at their kink.
  for (auto& p : net.params()) {
    if (p.name.ends_with(".bias")) {
      for (T& v : p.value) v = static_cast<T>(0.1 * standard_normal(rng));
    }
  }
  std::vector<std::vector<T>> inputs(opt.batch);
  std::vector<std::vector<double>> inputs64(opt.batch);
  std::vector<int> labels(opt.batch);
  for (std::size_t b = 0; b < opt.batch; ++b) {
    inputs[b].resize(net.input_size());
    for (T& v : inputs[b]) v = static_cast<T>(standard_normal(rng));
    inputs64[b].assign(inputs[b].begin(), inputs[b].end());
    labels[b] = static_cast<int>(rng() % cfg.n_classes);
  }
  const T scale = T(1) / static_cast<T>(opt.batch);
  auto g = net.zero_gradients();
  for (std::size_t b = 0; b < opt.batch; ++b) net.forward_backward(inputs[b], labels[b], g, scale);
  Gradients<double> analytic(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) analytic[i].assign(g[i].begin(), g[i].end());
  if (opt.corrupt) opt.corrupt(analytic);

  // Central differences are always taken in 64-bit arithmetic at the same
  // (precision-T) parameter values, so the comparison measures the
  // backward pass rather than rounding in the loss.
  Cnn<double> ref = net.template cast<double>();
  auto loss = [&]() {
    double acc = 0;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      acc -= ref.forward(inputs64[b])[static_cast<std::size_t>(labels[b])];
    }
    return acc / static_cast<double>(opt.batch);
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.params().size(); ++i) {
    auto& v = ref.params()[i].value;
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double orig = v[j];
      v[j] = orig + opt.epsilon;
      const double up = loss();
      v[j] = orig - opt.epsilon;
      const double down = loss();
      v[j] = orig;
      const double numeric = (up - down) / (2.0 * opt.epsilon);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.magnitude_floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

template double grad_check<float>(const CnnConfig&, std::uint64_t, const GradCheckOptions&);
template double grad_check<double>(const CnnConfig&, std::uint64_t, const GradCheckOptions&);

namespace {
constexpr char kCkptMagic[8] = {'S', 'B', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

std::uint64_t config_digest(const CnnConfig& cfg) { return fnv1a64(cfg.serialize()); }

void save_checkpoint(const Cnn<float>& net, const std::filesystem::path& path) {
  binio::Writer w(path);
  w.put_bytes(kCkptMagic, sizeof kCkptMagic);
  w.put<std::uint32_t>(kCkptVersion);
  const std::string cfg = net.config().serialize();
  w.put<std::uint64_t>(fnv1a64(cfg));
  w.put_string(cfg);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(net.params().size()));
  for (const auto& p : net.params()) {
    w.put_string(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) w.put<std::uint64_t>(d);
    w.put_bytes(p.value.data(), p.value.size() * sizeof(float));
  }
  w.close();
}

Cnn<float> load_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(path);
  char magic[8];
  r.get_bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCkptMagic, sizeof magic) != 0) throw FormatError("not a checkpoint: " + path.string());
  const auto version = r.get<std::uint32_t>();
  if (version != kCkptVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto digest = r.get<std::uint64_t>();
  const std::string cfg_text = r.get_string();
  if (fnv1a64(cfg_text) != digest) throw FormatError("checkpoint config digest mismatch in " + path.string());
  Cnn<float> net(CnnConfig::parse(cfg_text));
  const auto count = r.get<std::uint32_t>();
  if (count != net.params().size()) throw FormatError("checkpoint tensor count mismatch in " + path.string());
  for (auto& p : net.params()) {
    const std::string name = r.get_string();
    if (name != p.name) throw FormatError("checkpoint: expected tensor " + p.name + ", found " + name);
    const auto rank = r.get<std::uint32_t>();
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != p.shape) throw FormatError("checkpoint: shape mismatch for " + name);
    r.get_bytes(p.value.data(), p.value.size() * sizeof(float));
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes in " + path.string());
  return net;
}

}  // namespace scatterbench::models

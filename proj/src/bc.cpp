#include "passive/bc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include "passive/error.hpp"

namespace passive {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace {

constexpr double kLayerNormEps = 1e-5;

Index take(Index& o, Index size) {
  const Index at = o;
  o += size;
  return at;
}

template <typename Scalar>
struct Maps {
  using Plain = std::remove_const_t<Scalar>;
  using M = std::conditional_t<std::is_const_v<Scalar>, Eigen::Map<const Eigen::Matrix<Plain, -1, -1>>,
                               Eigen::Map<Eigen::Matrix<Plain, -1, -1>>>;
  using V = std::conditional_t<std::is_const_v<Scalar>, Eigen::Map<const Eigen::Matrix<Plain, -1, 1>>,
                               Eigen::Map<Eigen::Matrix<Plain, -1, 1>>>;
};

// GRU layout. Gate blocks are stacked [z; r; c].
struct GruOffsets {
  Index We, be, Wg, bg, Uzr, Uc, Wo, bo, total;

  explicit GruOffsets(const NetConfig& c) {
    const Index F = c.input_width(), E = c.encoder, H = c.hidden, A = c.num_actions();
    Index o = 0;
    We = take(o, E * F);
    be = take(o, E);
    Wg = take(o, 3 * H * E);
    bg = take(o, 3 * H);
    Uzr = take(o, 2 * H * H);
    Uc = take(o, H * H);
    Wo = take(o, A * H);
    bo = take(o, A);
    total = o;
  }
};

template <typename Scalar>
struct GruLayout {
  typename Maps<Scalar>::M We, Wg, Uzr, Uc, Wo;
  typename Maps<Scalar>::V be, bg, bo;

  GruLayout(Scalar* p, const NetConfig& c, const GruOffsets& o)
      : We(p + o.We, c.encoder, c.input_width()),
        Wg(p + o.Wg, 3 * c.hidden, c.encoder),
        Uzr(p + o.Uzr, 2 * c.hidden, c.hidden),
        Uc(p + o.Uc, c.hidden, c.hidden),
        Wo(p + o.Wo, c.num_actions(), c.hidden),
        be(p + o.be, c.encoder),
        bg(p + o.bg, 3 * c.hidden),
        bo(p + o.bo, c.num_actions()) {}
};

// Attention layout: encoder and position table, pre-norm, projections, final norm, head.
struct AttnOffsets {
  Index We, be, pos, g1, c1, Wq, Wk, Wv, Wo, bo, gf, cf, Wh, bh, total;

  explicit AttnOffsets(const NetConfig& c) {
    const Index F = c.input_width(), H = c.hidden, A = c.num_actions();
    Index o = 0;
    We = take(o, H * F);
    be = take(o, H);
    pos = take(o, H * c.horizon);
    g1 = take(o, H);
    c1 = take(o, H);
    Wq = take(o, H * H);
    Wk = take(o, H * H);
    Wv = take(o, H * H);
    Wo = take(o, H * H);
    bo = take(o, H);
    gf = take(o, H);
    cf = take(o, H);
    Wh = take(o, A * H);
    bh = take(o, A);
    total = o;
  }
};

template <typename Scalar>
struct AttnLayout {
  typename Maps<Scalar>::M We, pos, Wq, Wk, Wv, Wo, Wh;
  typename Maps<Scalar>::V be, g1, c1, bo, gf, cf, bh;

  AttnLayout(Scalar* p, const NetConfig& c, const AttnOffsets& o)
      : We(p + o.We, c.hidden, c.input_width()),
        pos(p + o.pos, c.hidden, c.horizon),
        Wq(p + o.Wq, c.hidden, c.hidden),
        Wk(p + o.Wk, c.hidden, c.hidden),
        Wv(p + o.Wv, c.hidden, c.hidden),
        Wo(p + o.Wo, c.hidden, c.hidden),
        Wh(p + o.Wh, c.num_actions(), c.hidden),
        be(p + o.be, c.hidden),
        g1(p + o.g1, c.hidden),
        c1(p + o.c1, c.hidden),
        bo(p + o.bo, c.hidden),
        gf(p + o.gf, c.hidden),
        cf(p + o.cf, c.hidden),
        bh(p + o.bh, c.num_actions()) {}
};

template <typename Derived>
MatrixXd sigmoid(const Eigen::MatrixBase<Derived>& x) {
  return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}

// Column-wise softmax, shifted by the column max.
MatrixXd softmax_cols(const MatrixXd& logits) {
  MatrixXd p = logits;
  for (Index b = 0; b < p.cols(); ++b) {
    p.col(b).array() -= p.col(b).maxCoeff();
    p.col(b) = p.col(b).array().exp().matrix();
    p.col(b) /= p.col(b).sum();
  }
  return p;
}

// Column-wise layer norm; `normed` keeps the unit-variance activations for the backward pass.
struct NormCache {
  MatrixXd normed;
  VectorXd inv_std;
};

template <typename G, typename C>
MatrixXd layer_norm(const MatrixXd& x, const G& gain, const C& bias, NormCache& cache) {
  const double H = static_cast<double>(x.rows());
  cache.normed.resize(x.rows(), x.cols());
  cache.inv_std.resize(x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).sum() / H;
    const VectorXd centered = x.col(j).array() - mean;
    const double var = centered.squaredNorm() / H;
    cache.inv_std[j] = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.normed.col(j) = centered * cache.inv_std[j];
  }
  return (cache.normed.array().colwise() * gain.array()).matrix().colwise() + bias;
}

template <typename G, typename DG, typename DC>
MatrixXd layer_norm_backward(const MatrixXd& dy, const NormCache& cache, const G& gain, DG&& dgain, DC&& dbias) {
  dgain += dy.cwiseProduct(cache.normed).rowwise().sum();
  dbias += dy.rowwise().sum();
  const MatrixXd dn = dy.array().colwise() * gain.array();
  const double H = static_cast<double>(dy.rows());
  MatrixXd dx(dy.rows(), dy.cols());
  for (Index j = 0; j < dy.cols(); ++j) {
    const double mean_dn = dn.col(j).sum() / H;
    const double mean_dn_n = dn.col(j).dot(cache.normed.col(j)) / H;
    dx.col(j) = cache.inv_std[j] * (dn.col(j).array() - mean_dn - cache.normed.col(j).array() * mean_dn_n).matrix();
  }
  return dx;
}

// Softmax over the visible prefix of each row (row t sees columns 0..t).
void causal_softmax_rows(MatrixXd& s) {
  for (Index t = 0; t < s.rows(); ++t) {
    const double mx = s.row(t).head(t + 1).maxCoeff();
    double sum = 0.0;
    for (Index j = 0; j <= t; ++j) sum += (s(t, j) = std::exp(s(t, j) - mx));
    s.row(t).head(t + 1) /= sum;
    s.row(t).tail(s.cols() - t - 1).setZero();
  }
}

void fill_uniform(VectorXd& p, Index at, Index size, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Index i = 0; i < size; ++i) p[at + i] = u(rng);
}

// Orthogonal h x h matrix: QR of a Gaussian matrix with the signs fixed.
MatrixXd orthogonal(Index h, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  MatrixXd m(h, h);
  for (Index j = 0; j < h; ++j) {
    for (Index i = 0; i < h; ++i) m(i, j) = g(rng);
  }
  Eigen::HouseholderQR<MatrixXd> qr(m);
  MatrixXd q = qr.householderQ();
  for (Index j = 0; j < h; ++j) {
    if (qr.matrixQR()(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q;
}

std::vector<double> to_vec(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }
VectorXd from_vec(const std::vector<double>& v) { return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size())); }

void check_batch(const NetConfig& c, const Batch& batch) {
  if (batch.length() == 0 || batch.size() == 0) throw DataError("empty batch");
  if (batch.length() > c.horizon) throw DataError("sequence longer than the network horizon");
  for (const auto& x : batch.inputs) {
    if (x.rows() != c.input_width()) throw DataError("batch input width mismatch");
  }
}

// Masked mean NLL and exploit accuracy of per-step logits; fills the logit gradients when asked.
LossStats score_logits(const Batch& batch, const std::vector<MatrixXd>& logits, std::vector<MatrixXd>* dlogits) {
  const Index T = batch.length(), B = batch.size();
  LossStats stats;
  double nll = 0.0;
  for (Index t = 0; t < T; ++t) {
    for (Index b = 0; b < B; ++b) {
      const double w = batch.mask[t][b];
      if (w <= 0.0) continue;
      const auto col = logits[t].col(b);
      const double mx = col.maxCoeff();
      const double lse = mx + std::log((col.array() - mx).exp().sum());
      nll += w * (lse - col[batch.targets[t][b]]);
      stats.weight += w;
      if (batch.exploit[t][b]) {
        ++stats.exploit_total;
        if (greedy_action(col) == batch.targets[t][b]) ++stats.exploit_correct;
      }
    }
  }
  if (stats.weight <= 0.0) throw DataError("batch has no unmasked steps");
  stats.loss = nll / stats.weight;
  if (dlogits) {
    dlogits->resize(T);
    for (Index t = 0; t < T; ++t) {
      MatrixXd& d = (*dlogits)[t];
      d = softmax_cols(logits[t]);
      for (Index b = 0; b < B; ++b) {
        const double w = batch.mask[t][b] / stats.weight;
        if (w <= 0.0) {
          d.col(b).setZero();
          continue;
        }
        d(batch.targets[t][b], b) -= 1.0;
        d.col(b) *= w;
      }
    }
  }
  return stats;
}

LossStats gru_loss(const NetConfig& config, const VectorXd& params, const Batch& batch, VectorXd* grad,
                    std::vector<MatrixXd>* forward_only) {
  const GruOffsets o(config);
  const GruLayout<const double> P(params.data(), config, o);
  const Index T = batch.length(), B = batch.size(), H = config.hidden;

  struct StepCache {
    MatrixXd x, a, z, r, c, h_prev, h;
  };
  std::vector<StepCache> cache(T);
  std::vector<MatrixXd> logits(T);
  MatrixXd h = MatrixXd::Zero(H, B);
  for (Index t = 0; t < T; ++t) {
    auto& k = cache[t];
    k.x = config.input_scale * batch.inputs[t];
    k.a = (P.We * k.x).colwise() + P.be;
    MatrixXd g = (P.Wg * k.a).colwise() + P.bg;
    g.topRows(2 * H).noalias() += P.Uzr * h;
    k.z = sigmoid(g.topRows(H));
    k.r = sigmoid(g.middleRows(H, H));
    k.c = (g.bottomRows(H) + P.Uc * k.r.cwiseProduct(h)).array().tanh().matrix();
    k.h_prev = h;
    h = h + k.z.cwiseProduct(k.c - h);
    k.h = h;
    logits[t] = (P.Wo * h).colwise() + P.bo;
  }
  if (forward_only) {
    *forward_only = std::move(logits);
    return {};
  }
  std::vector<MatrixXd> dlogits;
  const LossStats stats = score_logits(batch, logits, grad ? &dlogits : nullptr);
  if (!grad) return stats;

  grad->setZero(params.size());
  GruLayout<double> G(grad->data(), config, o);
  MatrixXd dh_next = MatrixXd::Zero(H, B);
  for (Index t = T - 1; t >= 0; --t) {
    const auto& k = cache[t];
    G.Wo.noalias() += dlogits[t] * k.h.transpose();
    G.bo += dlogits[t].rowwise().sum();
    MatrixXd dh = P.Wo.transpose() * dlogits[t] + dh_next;

    const MatrixXd dz = dh.cwiseProduct(k.c - k.h_prev);
    const MatrixXd dc = dh.cwiseProduct(k.z);
    MatrixXd dh_prev = dh.cwiseProduct((1.0 - k.z.array()).matrix());
    const MatrixXd dc_pre = dc.cwiseProduct((1.0 - k.c.array().square()).matrix());
    const MatrixXd rh = k.r.cwiseProduct(k.h_prev);
    G.Uc.noalias() += dc_pre * rh.transpose();
    const MatrixXd drh = P.Uc.transpose() * dc_pre;
    const MatrixXd dr = drh.cwiseProduct(k.h_prev);
    dh_prev += drh.cwiseProduct(k.r);

    MatrixXd dg(3 * H, B);
    dg.topRows(H) = dz.cwiseProduct(k.z.cwiseProduct((1.0 - k.z.array()).matrix()));
    dg.middleRows(H, H) = dr.cwiseProduct(k.r.cwiseProduct((1.0 - k.r.array()).matrix()));
    dg.bottomRows(H) = dc_pre;
    G.Wg.noalias() += dg * k.a.transpose();
    G.bg += dg.rowwise().sum();
    G.Uzr.noalias() += dg.topRows(2 * H) * k.h_prev.transpose();
    dh_prev.noalias() += P.Uzr.transpose() * dg.topRows(2 * H);

    const MatrixXd da = P.Wg.transpose() * dg;
    G.We.noalias() += da * k.x.transpose();
    G.be += da.rowwise().sum();
    dh_next = std::move(dh_prev);
  }
  return stats;
}

// Columns are time-major: column t * B + b holds step t of sequence b.
LossStats attention_loss(const NetConfig& config, const VectorXd& params, const Batch& batch, VectorXd* grad,
                    std::vector<MatrixXd>* forward_only) {
  const AttnOffsets o(config);
  const AttnLayout<const double> P(params.data(), config, o);
  const Index T = batch.length(), B = batch.size(), H = config.hidden, F = config.input_width();
  const Index heads = config.heads, d = H / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  MatrixXd X(F, T * B);
  for (Index t = 0; t < T; ++t) X.middleCols(t * B, B) = config.input_scale * batch.inputs[t];
  MatrixXd A = (P.We * X).colwise() + P.be;
  for (Index t = 0; t < T; ++t) A.middleCols(t * B, B).colwise() += P.pos.col(t);
  NormCache n1, nf;
  const MatrixXd U = layer_norm(A, P.g1, P.c1, n1);
  const MatrixXd Q = P.Wq * U, K = P.Wk * U, V = P.Wv * U;

  // Per sequence and head: T x T attention weights, row t over steps 0..t.
  std::vector<MatrixXd> weights(static_cast<std::size_t>(B * heads));
  MatrixXd Y(H, T * B);
  MatrixXd q(H, T), k(H, T), v(H, T);
  auto gather = [&](const MatrixXd& src, MatrixXd& dst, Index b) {
    for (Index t = 0; t < T; ++t) dst.col(t) = src.col(t * B + b);
  };
  for (Index b = 0; b < B; ++b) {
    gather(Q, q, b);
    gather(K, k, b);
    gather(V, v, b);
    MatrixXd y(H, T);
    for (Index j = 0; j < heads; ++j) {
      MatrixXd s = scale * (q.middleRows(j * d, d).transpose() * k.middleRows(j * d, d));
      causal_softmax_rows(s);
      y.middleRows(j * d, d).noalias() = v.middleRows(j * d, d) * s.transpose();
      weights[static_cast<std::size_t>(b * heads + j)] = std::move(s);
    }
    for (Index t = 0; t < T; ++t) Y.col(t * B + b) = y.col(t);
  }
  MatrixXd Hres = (P.Wo * Y).colwise() + P.bo;
  Hres += A;
  const MatrixXd Z = layer_norm(Hres, P.gf, P.cf, nf);
  const MatrixXd L = (P.Wh * Z).colwise() + P.bh;
  std::vector<MatrixXd> logits(T);
  for (Index t = 0; t < T; ++t) logits[t] = L.middleCols(t * B, B);

  if (forward_only) {
    *forward_only = std::move(logits);
    return {};
  }
  std::vector<MatrixXd> dlogits;
  const LossStats stats = score_logits(batch, logits, grad ? &dlogits : nullptr);
  if (!grad) return stats;

  grad->setZero(params.size());
  AttnLayout<double> G(grad->data(), config, o);
  MatrixXd dL(L.rows(), T * B);
  for (Index t = 0; t < T; ++t) dL.middleCols(t * B, B) = dlogits[t];
  G.Wh.noalias() += dL * Z.transpose();
  G.bh += dL.rowwise().sum();
  const MatrixXd dHres = layer_norm_backward(P.Wh.transpose() * dL, nf, P.gf, G.gf, G.cf);
  G.Wo.noalias() += dHres * Y.transpose();
  G.bo += dHres.rowwise().sum();
  const MatrixXd dY = P.Wo.transpose() * dHres;

  MatrixXd dQ(H, T * B), dK(H, T * B), dV(H, T * B);
  MatrixXd dy(H, T), dq(H, T), dk(H, T), dv(H, T);
  for (Index b = 0; b < B; ++b) {
    gather(Q, q, b);
    gather(K, k, b);
    gather(V, v, b);
    gather(dY, dy, b);
    for (Index j = 0; j < heads; ++j) {
      const MatrixXd& w = weights[static_cast<std::size_t>(b * heads + j)];
      const auto rows = Eigen::seqN(j * d, d);
      dv(rows, Eigen::all).noalias() = dy(rows, Eigen::all) * w;
      const MatrixXd dw = dy(rows, Eigen::all).transpose() * v(rows, Eigen::all);
      MatrixXd ds = w.cwiseProduct(dw);
      const VectorXd row_dot = ds.rowwise().sum();
      ds -= (w.array().colwise() * row_dot.array()).matrix();
      dq(rows, Eigen::all).noalias() = scale * (k(rows, Eigen::all) * ds.transpose());
      dk(rows, Eigen::all).noalias() = scale * (q(rows, Eigen::all) * ds);
    }
    for (Index t = 0; t < T; ++t) {
      dQ.col(t * B + b) = dq.col(t);
      dK.col(t * B + b) = dk.col(t);
      dV.col(t * B + b) = dv.col(t);
    }
  }
  G.Wq.noalias() += dQ * U.transpose();
  G.Wk.noalias() += dK * U.transpose();
  G.Wv.noalias() += dV * U.transpose();
  MatrixXd dU = P.Wq.transpose() * dQ;
  dU.noalias() += P.Wk.transpose() * dK;
  dU.noalias() += P.Wv.transpose() * dV;
  const MatrixXd dA = dHres + layer_norm_backward(dU, n1, P.g1, G.g1, G.c1);
  G.We.noalias() += dA * X.transpose();
  G.be += dA.rowwise().sum();
  for (Index t = 0; t < T; ++t) G.pos.col(t) += dA.middleCols(t * B, B).rowwise().sum();
  return stats;
}

}  // namespace

std::string loss_mask_name(LossMask m) { return m == LossMask::All ? "all" : "exploit_only"; }

LossMask parse_loss_mask(const std::string& s) {
  if (s == "all") return LossMask::All;
  if (s == "exploit_only") return LossMask::ExploitOnly;
  throw ConfigError("unknown loss mask '" + s + "' (expected all or exploit_only)");
}

std::string schedule_name(LrSchedule s) { return s == LrSchedule::Constant ? "constant" : "cosine"; }

LrSchedule parse_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "cosine") return LrSchedule::Cosine;
  throw ConfigError("unknown learning-rate schedule '" + s + "' (expected constant or cosine)");
}

std::string memory_name(Memory m) { return m == Memory::Gru ? "gru" : "attention"; }

Memory parse_memory(const std::string& s) {
  if (s == "gru") return Memory::Gru;
  if (s == "attention") return Memory::Attention;
  throw ConfigError("unknown memory '" + s + "' (expected gru or attention)");
}

void NetConfig::validate() const {
  if (n < 2) throw ConfigError("net.n must be >= 2");
  if (hidden < 1 || encoder < 1) throw ConfigError("net widths must be positive");
  if (horizon < 1) throw ConfigError("net.horizon must be positive");
  if (!(input_scale > 0) || !(head_init_scale > 0)) throw ConfigError("net scales must be positive");
  if (memory == Memory::Attention && (heads < 1 || hidden % heads != 0)) {
    throw ConfigError("net.heads must divide net.hidden");
  }
}

NetConfig net_config_for(const DatasetManifest& manifest, int hidden) {
  NetConfig c;
  c.n = manifest.dag.n;
  c.adaptive = manifest.dag.adaptive();
  c.hidden = hidden;
  c.encoder = hidden;
  c.horizon = manifest.steps_per_episode();
  c.input_scale = 1.0 / manifest.dag.intervention_magnitude;
  return c;
}

Index PolicyNet::count_params(const NetConfig& config) {
  return config.memory == Memory::Gru ? GruOffsets(config).total : AttnOffsets(config).total;
}

PolicyNet::PolicyNet(NetConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  params_ = VectorXd::Zero(count_params(config_));
  Rng rng(seed);
  const Index F = config_.input_width(), H = config_.hidden, A = config_.num_actions();
  const double head_bound = config_.head_init_scale / std::sqrt(static_cast<double>(H));
  if (config_.memory == Memory::Gru) {
    const GruOffsets o(config_);
    const Index E = config_.encoder;
    fill_uniform(params_, o.We, E * F, 1.0 / std::sqrt(static_cast<double>(F)), rng);
    fill_uniform(params_, o.Wg, 3 * H * E, 1.0 / std::sqrt(static_cast<double>(E)), rng);
    Eigen::Map<MatrixXd> uzr(params_.data() + o.Uzr, 2 * H, H);
    uzr.topRows(H) = orthogonal(H, rng);
    uzr.bottomRows(H) = orthogonal(H, rng);
    Eigen::Map<MatrixXd>(params_.data() + o.Uc, H, H) = orthogonal(H, rng);
    fill_uniform(params_, o.Wo, A * H, head_bound, rng);
    return;
  }
  const AttnOffsets o(config_);
  const double proj_bound = 1.0 / std::sqrt(static_cast<double>(H));
  fill_uniform(params_, o.We, H * F, 1.0 / std::sqrt(static_cast<double>(F)), rng);
  params_.segment(o.g1, H).setOnes();
  for (Index at : {o.Wq, o.Wk, o.Wv, o.Wo}) fill_uniform(params_, at, H * H, proj_bound, rng);
  params_.segment(o.gf, H).setOnes();
  fill_uniform(params_, o.Wh, A * H, head_bound, rng);
}

PolicyNet::PolicyNet(NetConfig config, VectorXd params) : config_(config), params_(std::move(params)) {
  config_.validate();
  if (params_.size() != count_params(config_)) {
    throw DataError("parameter vector has " + std::to_string(params_.size()) + " entries, config needs " +
                    std::to_string(count_params(config_)));
  }
}

LossStats PolicyNet::loss(const Batch& batch, VectorXd* grad) const {
  check_batch(config_, batch);
  return config_.memory == Memory::Gru ? gru_loss(config_, params_, batch, grad, nullptr)
                                       : attention_loss(config_, params_, batch, grad, nullptr);
}

std::vector<MatrixXd> PolicyNet::forward(const Batch& batch) const {
  check_batch(config_, batch);
  std::vector<MatrixXd> logits;
  if (config_.memory == Memory::Gru) {
    gru_loss(config_, params_, batch, nullptr, &logits);
  } else {
    attention_loss(config_, params_, batch, nullptr, &logits);
  }
  return logits;
}

MemoryState PolicyNet::initial_state() const {
  MemoryState s;
  if (config_.memory == Memory::Gru) {
    s.h = VectorXd::Zero(config_.hidden);
  } else {
    s.keys.resize(config_.hidden, 0);
    s.values.resize(config_.hidden, 0);
  }
  return s;
}

VectorXd PolicyNet::step(const std::vector<double>& features, MemoryState& state) const {
  const Index H = config_.hidden;
  if (static_cast<Index>(features.size()) != config_.input_width()) throw DataError("observation width mismatch");
  if (state.t >= config_.horizon) {
    throw DataError("episode step " + std::to_string(state.t + 1) + " exceeds the policy horizon " +
                    std::to_string(config_.horizon));
  }
  const VectorXd x = config_.input_scale * Eigen::Map<const VectorXd>(features.data(), config_.input_width());
  const Index t = state.t++;
  if (config_.memory == Memory::Gru) {
    const GruOffsets o(config_);
    const GruLayout<const double> P(params_.data(), config_, o);
    VectorXd& h = state.h;
    const VectorXd a = P.We * x + P.be;
    VectorXd g = P.Wg * a + P.bg;
    g.head(2 * H) += P.Uzr * h;
    const VectorXd z = sigmoid(g.head(H));
    const VectorXd r = sigmoid(g.segment(H, H));
    const VectorXd c = (g.tail(H) + P.Uc * r.cwiseProduct(h)).array().tanh().matrix();
    h = h + z.cwiseProduct(c - h);
    return P.Wo * h + P.bo;
  }
  const AttnOffsets o(config_);
  const AttnLayout<const double> P(params_.data(), config_, o);
  const Index heads = config_.heads, d = H / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const MatrixXd a = P.We * x + P.be + P.pos.col(t);
  NormCache cache;
  const MatrixXd u = layer_norm(a, P.g1, P.c1, cache);
  const VectorXd q = P.Wq * u;
  state.keys.conservativeResize(H, t + 1);
  state.values.conservativeResize(H, t + 1);
  state.keys.col(t) = P.Wk * u;
  state.values.col(t) = P.Wv * u;
  VectorXd y(H);
  for (Index j = 0; j < heads; ++j) {
    VectorXd s = scale * (state.keys.middleRows(j * d, d).transpose() * q.segment(j * d, d));
    s = (s.array() - s.maxCoeff()).exp().matrix();
    s /= s.sum();
    y.segment(j * d, d) = state.values.middleRows(j * d, d) * s;
  }
  const MatrixXd h = a + P.Wo * y + P.bo;
  return P.Wh * layer_norm(h, P.gf, P.cf, cache) + P.bh;
}

int greedy_action(const VectorXd& logits) {
  if (logits.size() == 0) throw std::invalid_argument("empty logits");
  Index best = 0;
  for (Index i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<int>(best);
}

Action LearnedPolicy::act(const Observation& obs) {
  logits_ = net_->step(features(obs), state_);
  return {greedy_action(logits_)};
}

Example to_example(const TrajectoryRecord& record) {
  Example e;
  for (const auto& s : record.steps) {
    e.features.push_back(features(s.observation));
    e.actions.push_back(s.action);
    e.exploit.push_back(s.observation.goal() >= 0);
  }
  return e;
}

Batch make_batch(const std::vector<const Example*>& examples, LossMask mask) {
  if (examples.empty()) throw DataError("empty batch");
  std::size_t T = 0;
  for (const auto* e : examples) T = std::max(T, e->actions.size());
  const auto F = static_cast<Index>(examples.front()->features.front().size());
  const auto B = static_cast<Index>(examples.size());
  Batch batch;
  batch.inputs.assign(T, MatrixXd::Zero(F, B));
  batch.targets.assign(T, std::vector<int>(B, 0));
  batch.mask.assign(T, std::vector<double>(B, 0.0));
  batch.exploit.assign(T, std::vector<bool>(B, false));
  for (Index b = 0; b < B; ++b) {
    const auto& e = *examples[b];
    for (std::size_t t = 0; t < e.actions.size(); ++t) {
      if (static_cast<Index>(e.features[t].size()) != F) throw DataError("examples differ in feature width");
      batch.inputs[t].col(b) = Eigen::Map<const VectorXd>(e.features[t].data(), F);
      batch.targets[t][b] = e.actions[t];
      batch.mask[t][b] = (mask == LossMask::All || e.exploit[t]) ? 1.0 : 0.0;
      batch.exploit[t][b] = e.exploit[t];
    }
  }
  return batch;
}

// ---- configuration and checkpoints ----

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be positive");
  if (!(max_grad_norm > 0)) throw ConfigError("train.max_grad_norm must be positive");
  if (total_steps < 0) throw ConfigError("train.total_steps must be non-negative");
  if (eval_every < 1) throw ConfigError("train.eval_every must be positive");
}

double TrainConfig::rate_at(std::int64_t step) const {
  if (lr_schedule == LrSchedule::Constant || total_steps <= 0) return learning_rate;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

json to_json(const NetConfig& c) {
  return {{"n", c.n},
          {"adaptive", c.adaptive},
          {"memory", memory_name(c.memory)},
          {"hidden", c.hidden},
          {"encoder", c.encoder},
          {"heads", c.heads},
          {"horizon", c.horizon},
          {"input_scale", c.input_scale},
          {"head_init_scale", c.head_init_scale}};
}

NetConfig net_config_from_json(const json& j) {
  NetConfig c;
  c.n = j.at("n").get<int>();
  c.adaptive = j.at("adaptive").get<bool>();
  c.memory = parse_memory(j.at("memory").get<std::string>());
  c.hidden = j.at("hidden").get<int>();
  c.encoder = j.at("encoder").get<int>();
  c.heads = j.at("heads").get<int>();
  c.horizon = j.at("horizon").get<int>();
  c.input_scale = j.at("input_scale").get<double>();
  c.head_init_scale = j.at("head_init_scale").get<double>();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},   {"learning_rate", c.learning_rate}, {"lr_schedule", schedule_name(c.lr_schedule)},
          {"beta1", c.beta1},
          {"beta2", c.beta2},             {"adam_eps", c.adam_eps},           {"max_grad_norm", c.max_grad_norm},
          {"total_steps", c.total_steps}, {"eval_every", c.eval_every},       {"seed", c.seed},
          {"loss_mask", loss_mask_name(c.loss_mask)}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.lr_schedule = parse_schedule(j.at("lr_schedule").get<std::string>());
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.max_grad_norm = j.at("max_grad_norm").get<double>();
  c.total_steps = j.at("total_steps").get<std::int64_t>();
  c.eval_every = j.at("eval_every").get<std::int64_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.loss_mask = parse_loss_mask(j.at("loss_mask").get<std::string>());
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json j = {{"format", "passive-checkpoint"},
            {"version", kCheckpointVersion},
            {"net", to_json(ckpt.net)},
            {"train", to_json(ckpt.train)},
            {"step", ckpt.step},
            {"manifest_hash", ckpt.manifest_hash},
            {"num_params", ckpt.params.size()},
            {"params", to_vec(ckpt.params)},
            {"adam_m", to_vec(ckpt.adam_m)},
            {"adam_v", to_vec(ckpt.adam_v)}};
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump() << '\n';
    if (!out) throw DataError("cannot write checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move checkpoint into " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path);
  try {
    const json j = json::parse(in);
    if (j.value("format", "") != "passive-checkpoint") throw DataError(path + " is not a checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) throw DataError("unsupported checkpoint version in " + path);
    Checkpoint c;
    c.net = net_config_from_json(j.at("net"));
    c.train = train_config_from_json(j.at("train"));
    c.step = j.at("step").get<std::int64_t>();
    c.manifest_hash = j.at("manifest_hash").get<std::string>();
    c.params = from_vec(j.at("params").get<std::vector<double>>());
    c.adam_m = from_vec(j.at("adam_m").get<std::vector<double>>());
    c.adam_v = from_vec(j.at("adam_v").get<std::vector<double>>());
    const Index expected = PolicyNet::count_params(c.net);
    if (c.params.size() != expected || c.adam_m.size() != expected || c.adam_v.size() != expected) {
      throw DataError("checkpoint " + path + " has inconsistent parameter counts");
    }
    return c;
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint " + path + ": " + e.what());
  }
}

// ---- data sources ----

void check_compatible(const NetConfig& net, const DatasetManifest& manifest) {
  if (net.n != manifest.dag.n) {
    throw DataError("network expects n=" + std::to_string(net.n) + ", dataset has n=" + std::to_string(manifest.dag.n));
  }
  if (net.adaptive != manifest.dag.adaptive()) throw DataError("network and dataset disagree on the relevance cue");
  if (net.horizon < manifest.steps_per_episode()) {
    throw DataError("network horizon " + std::to_string(net.horizon) + " is shorter than the episode length " +
                    std::to_string(manifest.steps_per_episode()));
  }
}

DatasetSource::DatasetSource(DatasetManifest manifest, const std::vector<TrajectoryRecord>& records,
                             std::uint64_t seed)
    : manifest_(std::move(manifest)), seed_(seed) {
  if (records.empty()) throw DataError("dataset has no records");
  examples_.reserve(records.size());
  for (const auto& r : records) examples_.push_back(to_example(r));
}

const std::vector<std::size_t>& DatasetSource::epoch_order(std::int64_t epoch) {
  if (epoch != cached_epoch_) {
    order_.resize(examples_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order_[i - 1], order_[pick(rng)]);
    }
    cached_epoch_ = epoch;
  }
  return order_;
}

Batch DatasetSource::batch(std::int64_t step, int batch_size, LossMask mask) {
  const auto n = static_cast<std::int64_t>(examples_.size());
  std::vector<const Example*> picked;
  for (int j = 0; j < batch_size; ++j) {
    const std::int64_t idx = step * batch_size + j;
    picked.push_back(&examples_[epoch_order(idx / n)[static_cast<std::size_t>(idx % n)]]);
  }
  return make_batch(picked, mask);
}

Batch StreamSource::batch(std::int64_t step, int batch_size, LossMask mask) {
  std::vector<Example> examples;
  for (int j = 0; j < batch_size; ++j) examples.push_back(to_example(make_record(manifest_, step * batch_size + j)));
  std::vector<const Example*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  return make_batch(ptrs, mask);
}

// ---- training ----

double clip_global_norm(VectorXd& grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm) grad *= max_norm / norm;
  return norm;
}

Trainer::Trainer(NetConfig net, TrainConfig train, std::string manifest_hash)
    : net_(net, train.seed), train_(train), manifest_hash_(std::move(manifest_hash)) {
  train_.validate();
  m_ = VectorXd::Zero(net_.num_params());
  v_ = VectorXd::Zero(net_.num_params());
}

Trainer::Trainer(const Checkpoint& c)
    : net_(c.net, c.params), train_(c.train), manifest_hash_(c.manifest_hash), m_(c.adam_m), v_(c.adam_v),
      step_(c.step) {
  train_.validate();
}

LossStats Trainer::update(const Batch& batch) {
  VectorXd grad;
  const LossStats stats = net_.loss(batch, &grad);
  if (!std::isfinite(stats.loss)) {
    throw NumericError("non-finite loss " + std::to_string(stats.loss) + " at step " + std::to_string(step_ + 1));
  }
  if (!grad.allFinite()) throw NumericError("non-finite gradient at step " + std::to_string(step_ + 1));
  last_grad_norm_ = clip_global_norm(grad, train_.max_grad_norm);
  last_clipped_norm_ = grad.norm();
  if (last_clipped_norm_ > train_.max_grad_norm * (1.0 + 1e-12)) {
    throw NumericError("gradient norm " + std::to_string(last_clipped_norm_) + " exceeds the clip bound");
  }
  ++step_;
  const double b1 = train_.beta1, b2 = train_.beta2;
  m_ = b1 * m_ + (1.0 - b1) * grad;
  v_ = b2 * v_ + (1.0 - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  net_.params().array() -=
      train_.rate_at(step_) * (m_.array() / c1) / ((v_.array() / c2).sqrt() + train_.adam_eps);
  if (!net_.params().allFinite()) throw NumericError("non-finite parameters after step " + std::to_string(step_));
  return stats;
}

std::string metric_header(const EvalHook* hook) {
  std::string h = "step,loss,exploit_accuracy,grad_norm";
  if (hook) {
    for (const auto& n : hook->names) h += "," + n;
  }
  return h;
}

std::string metric_line(const MetricRow& row) {
  std::ostringstream s;
  s.precision(10);
  s << row.step << ',' << row.loss << ',' << row.exploit_accuracy << ',' << row.grad_norm;
  for (double x : row.extra) s << ',' << x;
  return s.str();
}

std::vector<MetricRow> Trainer::run(ExampleSource& source, std::ostream* log, const EvalHook* hook) {
  check_compatible(net_.config(), source.manifest());
  if (log && step_ == 0) *log << metric_header(hook) << '\n';
  std::vector<MetricRow> rows;
  double loss_sum = 0.0, norm_sum = 0.0;
  int correct = 0, total = 0, count = 0;
  while (step_ < train_.total_steps) {
    const auto stats = update(source.batch(step_, train_.batch_size, train_.loss_mask));
    loss_sum += stats.loss;
    norm_sum += last_grad_norm_;
    correct += stats.exploit_correct;
    total += stats.exploit_total;
    ++count;
    if (step_ % train_.eval_every == 0 || step_ == train_.total_steps) {
      MetricRow row{step_, loss_sum / count, total ? static_cast<double>(correct) / total : 0.0, norm_sum / count, {}};
      if (hook) row.extra = hook->run(net_);
      if (log) {
        *log << metric_line(row) << '\n';
        log->flush();
      }
      rows.push_back(std::move(row));
      loss_sum = norm_sum = 0.0;
      correct = total = count = 0;
    }
  }
  return rows;
}

Checkpoint Trainer::checkpoint() const {
  return {net_.config(), train_, net_.params(), m_, v_, step_, manifest_hash_};
}

// ---- gradient check ----

GradientCheckReport gradient_check(const PolicyNet& net, const Batch& batch, double tolerance, double eps) {
  VectorXd analytic;
  net.loss(batch, &analytic);
  PolicyNet probe(net.config(), net.params());
  GradientCheckReport report;
  for (Index i = 0; i < probe.num_params(); ++i) {
    const double saved = probe.params()[i];
    probe.params()[i] = saved + eps;
    const double up = probe.loss(batch).loss;
    probe.params()[i] = saved - eps;
    const double down = probe.loss(batch).loss;
    probe.params()[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (!(rel <= report.max_relative_error)) {
      report.max_relative_error = rel;
      report.worst_index = i;
    }
    ++report.checked;
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace passive

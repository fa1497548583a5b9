#include "dstn/models.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <thread>

#include "dstn/error.hpp"
#include "dstn/simd/kernels.hpp"

namespace dstn {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::lr: return "lr";
    case Variant::dnn: return "dnn";
    case Variant::dstn_p: return "dstn-p";
    case Variant::dstn_s: return "dstn-s";
    case Variant::dstn_i: return "dstn-i";
  }
  return "?";
}

std::string_view display_name(Variant v) {
  switch (v) {
    case Variant::lr: return "LR";
    case Variant::dnn: return "DNN";
    case Variant::dstn_p: return "DSTN-P";
    case Variant::dstn_s: return "DSTN-S";
    case Variant::dstn_i: return "DSTN-I";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::lr, Variant::dnn, Variant::dstn_p, Variant::dstn_s, Variant::dstn_i})
    if (s == to_string(v) || s == display_name(v)) return v;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

namespace {

constexpr std::array<const char*, 3> kAuxShort{"ctx", "clk", "unclk"};

void require_same_group(std::span<const InstanceEmbedding> ads, std::size_t dim) {
  for (const InstanceEmbedding& a : ads) {
    require(a.group == ads.front().group, "aggregate: ads from mixed groups");
    require(a.x.size() == dim, "aggregate: embedding dimension mismatch");
  }
}

// Writes b into every row of m.
void broadcast_rows(Matrix& m, std::span<const double> b) {
  for (std::size_t r = 0; r < m.rows(); ++r) std::copy(b.begin(), b.end(), m.row(r).begin());
}

void add_colsum(const Matrix& m, Matrix& out_row) {
  double* dst = out_row.data();
  for (std::size_t r = 0; r < m.rows(); ++r) simd::axpy(1.0, m.row(r).data(), dst, m.cols());
}

double clamp_exp(double s, double clamp) { return std::exp(std::min(s, clamp)); }

}  // namespace

Vector aggregate_pooling(std::span<const InstanceEmbedding> ads, std::size_t dim) {
  Vector out(dim, 0.0);
  if (ads.empty()) return out;
  require_same_group(ads, dim);
  for (const InstanceEmbedding& a : ads)
    for (std::size_t j = 0; j < dim; ++j) out[j] += a.x[j];
  return out;
}

AttentionResult aggregate_self_attention(std::span<const InstanceEmbedding> ads,
                                         const SelfAttentionParams& p) {
  require(!ads.empty(), "aggregate_self_attention: empty ad list");
  const std::size_t dim = p.w1.cols();
  require_same_group(ads, dim);
  require(p.b1.size() == p.w1.rows() && p.h.size() == p.w1.rows(),
          "aggregate_self_attention: parameter shape mismatch");
  Vector beta(ads.size());
  for (std::size_t i = 0; i < ads.size(); ++i) {
    const Vector hidden = relu(linear(p.w1, p.b1, ads[i].x));
    beta[i] = simd::dot(hidden.data(), p.h.data(), hidden.size()) + p.b2;
  }
  const double mx = *std::max_element(beta.begin(), beta.end());
  AttentionResult r{Vector(dim, 0.0), Vector(ads.size())};
  double z = 0.0;
  for (std::size_t i = 0; i < ads.size(); ++i) z += (r.weights[i] = std::exp(beta[i] - mx));
  for (std::size_t i = 0; i < ads.size(); ++i) {
    r.weights[i] /= z;
    simd::axpy(r.weights[i], ads[i].x.data(), r.output.data(), dim);
  }
  return r;
}

AttentionResult aggregate_interactive_attention(const InstanceEmbedding& target,
                                                std::span<const InstanceEmbedding> ads,
                                                const InteractiveAttentionParams& p,
                                                std::size_t dim) {
  AttentionResult r{Vector(dim, 0.0), {}};
  if (ads.empty()) return r;
  require_same_group(ads, dim);
  require(p.w.cols() == target.x.size() + dim, "aggregate_interactive_attention: W shape mismatch");
  require(p.b1.size() == p.w.rows() && p.h.size() == p.w.rows(),
          "aggregate_interactive_attention: parameter shape mismatch");
  Vector joint(target.x.size() + dim);
  std::copy(target.x.begin(), target.x.end(), joint.begin());
  for (const InstanceEmbedding& a : ads) {
    std::copy(a.x.begin(), a.x.end(), joint.begin() + static_cast<std::ptrdiff_t>(target.x.size()));
    const Vector hidden = relu(linear(p.w, p.b1, joint));
    const double s = simd::dot(hidden.data(), p.h.data(), hidden.size()) + p.b2;
    const double alpha = clamp_exp(s, p.clamp);
    r.weights.push_back(alpha);
    simd::axpy(alpha, a.x.data(), r.output.data(), dim);
  }
  return r;
}

// ---------------------------------------------------------------------------

std::size_t ParamSet::add(std::string name, Matrix value) {
  require(index_of(name) == size(), "ParamSet: duplicate tensor name");
  params_.push_back({std::move(name), std::move(value)});
  return params_.size() - 1;
}

std::size_t ParamSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return params_.size();
}

Matrix& ParamSet::at(std::string_view name) {
  const std::size_t i = index_of(name);
  if (i == size()) throw ContractViolation("no parameter named '" + std::string(name) + "'");
  return params_[i].value;
}

const Matrix& ParamSet::at(std::string_view name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const Param& p : params_) n += p.value.size();
  return n;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].name != b[i].name || !(a[i].value == b[i].value)) return false;
  return true;
}

void Gradients::clear() {
  embedding.clear();
  for (Matrix& m : dense) m.fill(0.0);
}

// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg, const Schema& schema, std::size_t vocab_size, std::uint64_t seed)
    : cfg_(std::move(cfg)), schema_(schema), vocab_size_(vocab_size) {
  schema_.validate();
  require(vocab_size_ > 0, "Model: empty vocabulary");
  require(cfg_.dropout >= 0.0 && cfg_.dropout < 1.0, "Model: dropout must be in [0, 1)");
  if (cfg_.variant == Variant::lr) cfg_.embedding_dim = 1;
  require(cfg_.embedding_dim > 0, "Model: embedding_dim must be positive");
  const std::size_t k = cfg_.embedding_dim;
  for (AdGroup g : kAllGroups) dims_[static_cast<int>(g)] = schema_.group(g).field_count() * k;
  require(dims_[0] > 0, "Model: target group has no fields");

  params_.add("embedding", Matrix(vocab_size_, k));
  if (cfg_.variant == Variant::lr) {
    lr_bias_ = params_.add("bias", Matrix(1, 1));
    init_params(seed);
    return;
  }
  require(cfg_.uses_aux() || cfg_.variant == Variant::dnn, "Model: unknown variant");

  fused_dim_ = dims_[0];
  for (AdGroup g : kAuxGroups) {
    if (!cfg_.group_enabled(g)) continue;
    const std::size_t d = group_dim(g);
    require(d > 0, "Model: enabled auxiliary group has no fields");
    fused_dim_ += d;
    const std::size_t s = aux_slot(g);
    const std::string base = std::string(cfg_.variant == Variant::dstn_s ? "self." : "inter.") + kAuxShort[s];
    const std::size_t a = cfg_.attention_dim;
    if (cfg_.variant == Variant::dstn_s) {
      att_w_[s] = params_.add(base + ".w1", Matrix(a, d));
    } else if (cfg_.variant == Variant::dstn_i) {
      att_w_[s] = params_.add(base + ".w", Matrix(a, dims_[0] + d));
    } else {
      continue;
    }
    require(a > 0, "Model: attention_dim must be positive");
    att_b1_[s] = params_.add(base + ".b1", Matrix(1, a));
    att_h_[s] = params_.add(base + ".h", Matrix(1, a));
    att_b2_[s] = params_.add(base + ".b2", Matrix(1, 1));
  }
  std::size_t in = fused_dim_;
  for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
    require(cfg_.hidden[l] > 0, "Model: hidden layer width must be positive");
    const std::string base = "fc" + std::to_string(l + 1);
    fc_w_.push_back(params_.add(base + ".w", Matrix(cfg_.hidden[l], in)));
    fc_b_.push_back(params_.add(base + ".b", Matrix(1, cfg_.hidden[l])));
    in = cfg_.hidden[l];
  }
  out_w_ = params_.add("out.w", Matrix(1, in));
  out_b_ = params_.add("out.b", Matrix(1, 1));
  init_params(seed);
}

void Model::init_params(std::uint64_t seed) {
  const Rng root(seed);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = params_[i];
    Rng rng = root.fork(i);
    const bool is_bias = p.name.ends_with(".b") || p.name.ends_with(".b1") ||
                         p.name.ends_with(".b2") || p.name == "bias";
    if (i == 0) {
      for (double& v : p.value.values()) v = rng.uniform(-cfg_.embedding_init_scale, cfg_.embedding_init_scale);
    } else if (is_bias) {
      p.value.fill(0.0);
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
      for (double& v : p.value.values()) v = rng.uniform(-limit, limit);
    }
  }
}

Gradients Model::make_gradients() const {
  Gradients g;
  g.embedding = RowGradientBuffer(params_[0].value.rows(), params_[0].value.cols());
  g.dense.reserve(params_.size());
  g.dense.emplace_back();
  for (std::size_t i = 1; i < params_.size(); ++i)
    g.dense.emplace_back(params_[i].value.rows(), params_[i].value.cols());
  return g;
}

void Model::check_example(const LabeledExample& ex) const {
  if (ex.target.field_count() != schema_.group(AdGroup::target).field_count())
    throw ContractViolation("example does not match the model's target schema");
  if (!cfg_.uses_aux()) return;
  for (AdGroup g : kAuxGroups) {
    if (!cfg_.group_enabled(g)) continue;
    for (const EncodedInstance& a : ex.aux(g))
      if (a.field_count() != schema_.group(g).field_count())
        throw ContractViolation("example does not match the model's auxiliary schema");
  }
}

void Model::forward(std::span<const LabeledExample* const> batch, Mode mode, Rng* rng,
                    ForwardTrace& t) const {
  const std::size_t b_count = batch.size();
  const Matrix& table = params_[0].value;
  const std::size_t dt = dims_[0];
  t.batch = b_count;
  t.mode = mode;
  t.target.reset(b_count, dt);
  for (std::size_t b = 0; b < b_count; ++b) {
    check_example(*batch[b]);
    embed_into(batch[b]->target, table, t.target.row(b));
  }
  t.logit.assign(b_count, 0.0);
  t.yhat.assign(b_count, 0.0);

  if (cfg_.variant == Variant::lr) {
    const double bias = params_[lr_bias_].value(0, 0);
    for (std::size_t b = 0; b < b_count; ++b) {
      double s = bias;
      for (double v : t.target.row(b)) s += v;
      t.logit[b] = s;
      t.yhat[b] = sigmoid(s);
    }
    return;
  }

  for (AdGroup g : kAuxGroups) {
    ForwardTrace::Group& gt = t.groups[aux_slot(g)];
    gt.enabled = cfg_.group_enabled(g);
    if (!gt.enabled) {
      gt = ForwardTrace::Group{};
      continue;
    }
    const std::size_t d = group_dim(g);
    const std::size_t s = aux_slot(g);
    gt.dim = d;
    gt.offsets.assign(b_count + 1, 0);
    for (std::size_t b = 0; b < b_count; ++b)
      gt.offsets[b + 1] = gt.offsets[b] + static_cast<std::uint32_t>(batch[b]->aux(g).size());
    const std::size_t rows = gt.offsets[b_count];
    gt.ads.reset(rows, d);
    for (std::size_t b = 0; b < b_count; ++b) {
      const auto& list = batch[b]->aux(g);
      for (std::size_t i = 0; i < list.size(); ++i) embed_into(list[i], table, gt.ads.row(gt.offsets[b] + i));
    }
    gt.agg.reset(b_count, d);

    if (cfg_.variant == Variant::dstn_p) {
      gt.alpha.assign(rows, 1.0);
      for (std::size_t b = 0; b < b_count; ++b)
        for (std::size_t i = gt.offsets[b]; i < gt.offsets[b + 1]; ++i)
          simd::axpy(1.0, gt.ads.row(i).data(), gt.agg.row(b).data(), d);
      continue;
    }

    const Matrix& w = params_[att_w_[s]].value;
    const Matrix& b1 = params_[att_b1_[s]].value;
    const Matrix& h = params_[att_h_[s]].value;
    const double b2 = params_[att_b2_[s]].value(0, 0);
    const std::size_t a = cfg_.attention_dim;
    gt.hidden.reset(rows, a);
    broadcast_rows(gt.hidden, b1.values());
    if (cfg_.variant == Variant::dstn_s) {
      matmul_nt_acc(gt.ads, w, gt.hidden);
    } else {
      gt.input.reset(rows, dt + d);
      for (std::size_t b = 0; b < b_count; ++b) {
        for (std::size_t i = gt.offsets[b]; i < gt.offsets[b + 1]; ++i) {
          auto dst = gt.input.row(i);
          std::copy(t.target.row(b).begin(), t.target.row(b).end(), dst.begin());
          std::copy(gt.ads.row(i).begin(), gt.ads.row(i).end(), dst.begin() + static_cast<std::ptrdiff_t>(dt));
        }
      }
      matmul_nt_acc(gt.input, w, gt.hidden);
    }
    simd::relu(gt.hidden.data(), gt.hidden.size());
    gt.score.assign(rows, 0.0);
    gt.alpha.assign(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) gt.score[i] = simd::dot(gt.hidden.row(i).data(), h.data(), a) + b2;

    for (std::size_t b = 0; b < b_count; ++b) {
      const std::size_t lo = gt.offsets[b], hi = gt.offsets[b + 1];
      if (lo == hi) continue;
      if (cfg_.variant == Variant::dstn_s) {
        const double mx = *std::max_element(gt.score.begin() + lo, gt.score.begin() + hi);
        double z = 0.0;
        for (std::size_t i = lo; i < hi; ++i) z += (gt.alpha[i] = std::exp(gt.score[i] - mx));
        for (std::size_t i = lo; i < hi; ++i) gt.alpha[i] /= z;
      } else {
        for (std::size_t i = lo; i < hi; ++i) gt.alpha[i] = clamp_exp(gt.score[i], cfg_.attention_clamp);
      }
      for (std::size_t i = lo; i < hi; ++i)
        simd::axpy(gt.alpha[i], gt.ads.row(i).data(), gt.agg.row(b).data(), d);
    }
  }

  t.m.reset(b_count, fused_dim_);
  for (std::size_t b = 0; b < b_count; ++b) {
    auto dst = t.m.row(b).begin();
    dst = std::copy(t.target.row(b).begin(), t.target.row(b).end(), dst);
    for (const ForwardTrace::Group& gt : t.groups)
      if (gt.enabled) dst = std::copy(gt.agg.row(b).begin(), gt.agg.row(b).end(), dst);
  }

  const std::size_t layers = cfg_.hidden.size();
  t.act.resize(layers);
  t.out.resize(layers);
  const bool drop = mode == Mode::train && cfg_.dropout > 0.0;
  t.mask.resize(drop ? layers : 0);
  require(!drop || rng != nullptr, "Model::forward: train-mode dropout needs an RNG");
  const Matrix* in = &t.m;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix& act = t.act[l];
    act.reset(b_count, cfg_.hidden[l]);
    broadcast_rows(act, params_[fc_b_[l]].value.values());
    matmul_nt_acc(*in, params_[fc_w_[l]].value, act);
    simd::relu(act.data(), act.size());
    t.out[l] = act;
    if (drop) {
      t.mask[l].reset(b_count, cfg_.hidden[l]);
      dropout_mask(t.mask[l].values(), cfg_.dropout, *rng);
      for (std::size_t i = 0; i < act.size(); ++i) t.out[l].data()[i] *= t.mask[l].data()[i];
    }
    in = &t.out[l];
  }
  const Matrix& w_out = params_[out_w_].value;
  const double b_out = params_[out_b_].value(0, 0);
  for (std::size_t b = 0; b < b_count; ++b) {
    t.logit[b] = simd::dot(in->row(b).data(), w_out.data(), w_out.cols()) + b_out;
    t.yhat[b] = sigmoid(t.logit[b]);
  }
}

void Model::backward(const ForwardTrace& t, std::span<const LabeledExample* const> batch,
                     Gradients& grads) const {
  require(t.batch == batch.size() && t.yhat.size() == batch.size(), "backward: trace/batch mismatch");
  require(grads.dense.size() == params_.size(), "backward: gradient layout mismatch");
  const std::size_t b_count = batch.size();
  if (b_count == 0) return;
  const std::size_t dt = dims_[0];
  const double inv_b = 1.0 / static_cast<double>(b_count);
  Vector dlogit(b_count);
  for (std::size_t b = 0; b < b_count; ++b) {
    require(batch[b]->label == 0 || batch[b]->label == 1, "backward: label must be 0 or 1");
    dlogit[b] = (t.yhat[b] - batch[b]->label) * inv_b;
  }

  if (cfg_.variant == Variant::lr) {
    Vector seg;
    for (std::size_t b = 0; b < b_count; ++b) {
      grads.dense[lr_bias_](0, 0) += dlogit[b];
      seg.assign(dt, dlogit[b]);
      grads.embedding.scatter(batch[b]->target, seg);
    }
    return;
  }

  const std::size_t layers = cfg_.hidden.size();
  const Matrix& last_in = layers == 0 ? t.m : t.out[layers - 1];
  const Matrix& w_out = params_[out_w_].value;
  Matrix dcur(b_count, w_out.cols());
  for (std::size_t b = 0; b < b_count; ++b) {
    simd::axpy(dlogit[b], last_in.row(b).data(), grads.dense[out_w_].data(), w_out.cols());
    grads.dense[out_b_](0, 0) += dlogit[b];
    simd::axpy(dlogit[b], w_out.data(), dcur.row(b).data(), w_out.cols());
  }

  for (std::size_t l = layers; l-- > 0;) {
    const Matrix& act = t.act[l];
    Matrix& dpre = dcur;
    const bool masked = !t.mask.empty();
    for (std::size_t i = 0; i < dpre.size(); ++i) {
      double v = dpre.data()[i];
      if (masked) v *= t.mask[l].data()[i];
      dpre.data()[i] = act.data()[i] > 0.0 ? v : 0.0;
    }
    const Matrix& in = l == 0 ? t.m : t.out[l - 1];
    matmul_tn_acc(dpre, in, grads.dense[fc_w_[l]]);
    add_colsum(dpre, grads.dense[fc_b_[l]]);
    Matrix dnext(b_count, in.cols());
    matmul_nn_acc(dpre, params_[fc_w_[l]].value, dnext);
    dcur = std::move(dnext);
  }
  const Matrix& dm = dcur;

  Matrix dxt(b_count, dt);
  for (std::size_t b = 0; b < b_count; ++b)
    std::copy_n(dm.row(b).begin(), dt, dxt.row(b).begin());

  std::size_t col = dt;
  for (AdGroup g : kAuxGroups) {
    const std::size_t s = aux_slot(g);
    const ForwardTrace::Group& gt = t.groups[s];
    if (!gt.enabled) continue;
    const std::size_t d = gt.dim;
    const std::size_t rows = gt.ads.rows();
    Matrix dads(rows, d);
    Vector dalpha(rows, 0.0);
    for (std::size_t b = 0; b < b_count; ++b) {
      const double* dagg = dm.row(b).data() + col;
      for (std::size_t i = gt.offsets[b]; i < gt.offsets[b + 1]; ++i) {
        simd::axpy(gt.alpha[i], dagg, dads.row(i).data(), d);
        dalpha[i] = simd::dot(dagg, gt.ads.row(i).data(), d);
      }
    }
    col += d;

    if (cfg_.variant != Variant::dstn_p && rows > 0) {
      // dscore: gradient w.r.t. the attention MLP output for each ad.
      Vector dscore(rows, 0.0);
      for (std::size_t b = 0; b < b_count; ++b) {
        const std::size_t lo = gt.offsets[b], hi = gt.offsets[b + 1];
        if (cfg_.variant == Variant::dstn_s) {
          double sbar = 0.0;
          for (std::size_t i = lo; i < hi; ++i) sbar += gt.alpha[i] * dalpha[i];
          for (std::size_t i = lo; i < hi; ++i) dscore[i] = gt.alpha[i] * (dalpha[i] - sbar);
        } else {
          for (std::size_t i = lo; i < hi; ++i)
            dscore[i] = gt.score[i] < cfg_.attention_clamp ? gt.alpha[i] * dalpha[i] : 0.0;
        }
      }
      const Matrix& h = params_[att_h_[s]].value;
      const std::size_t a = cfg_.attention_dim;
      Matrix dhidden(rows, a);
      for (std::size_t i = 0; i < rows; ++i) {
        simd::axpy(dscore[i], gt.hidden.row(i).data(), grads.dense[att_h_[s]].data(), a);
        grads.dense[att_b2_[s]](0, 0) += dscore[i];
        const double* hid = gt.hidden.row(i).data();
        double* dh = dhidden.row(i).data();
        for (std::size_t j = 0; j < a; ++j) dh[j] = hid[j] > 0.0 ? dscore[i] * h(0, j) : 0.0;
      }
      const Matrix& w = params_[att_w_[s]].value;
      add_colsum(dhidden, grads.dense[att_b1_[s]]);
      if (cfg_.variant == Variant::dstn_s) {
        matmul_tn_acc(dhidden, gt.ads, grads.dense[att_w_[s]]);
        matmul_nn_acc(dhidden, w, dads);
      } else {
        matmul_tn_acc(dhidden, gt.input, grads.dense[att_w_[s]]);
        Matrix dinput(rows, dt + d);
        matmul_nn_acc(dhidden, w, dinput);
        for (std::size_t b = 0; b < b_count; ++b) {
          for (std::size_t i = gt.offsets[b]; i < gt.offsets[b + 1]; ++i) {
            const double* src = dinput.row(i).data();
            simd::axpy(1.0, src, dxt.row(b).data(), dt);
            simd::axpy(1.0, src + dt, dads.row(i).data(), d);
          }
        }
      }
    }

    for (std::size_t b = 0; b < b_count; ++b) {
      const auto& list = batch[b]->aux(g);
      for (std::size_t i = 0; i < list.size(); ++i) grads.embedding.scatter(list[i], dads.row(gt.offsets[b] + i));
    }
  }
  for (std::size_t b = 0; b < b_count; ++b) grads.embedding.scatter(batch[b]->target, dxt.row(b));
}

double Model::predict(const LabeledExample& ex) const {
  const LabeledExample* p = &ex;
  ForwardTrace t;
  forward(std::span<const LabeledExample* const>(&p, 1), Mode::eval, nullptr, t);
  return t.yhat[0];
}

std::vector<double> Model::predict(std::span<const LabeledExample> examples, std::size_t batch_size,
                                   std::size_t threads) const {
  require(batch_size > 0, "predict: batch_size must be positive");
  std::vector<double> out(examples.size());
  const std::size_t batches = (examples.size() + batch_size - 1) / batch_size;
  // Rows are scored independently, so the split across threads does not
  // change any output bit.
  auto work = [&](std::size_t first, std::size_t stride) {
    ForwardTrace t;
    std::vector<const LabeledExample*> ptrs;
    for (std::size_t b = first; b < batches; b += stride) {
      const std::size_t lo = b * batch_size, hi = std::min(examples.size(), lo + batch_size);
      ptrs.clear();
      for (std::size_t i = lo; i < hi; ++i) ptrs.push_back(&examples[i]);
      forward(ptrs, Mode::eval, nullptr, t);
      std::copy(t.yhat.begin(), t.yhat.end(), out.begin() + static_cast<std::ptrdiff_t>(lo));
    }
  };
  if (threads == 0) threads = std::min<std::size_t>(batches / 4, std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min(threads, batches);
  if (threads <= 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t k = 0; k < threads; ++k)
    pool.emplace_back([&, k] {
      try {
        work(k, threads);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

AttentionDump Model::attention(const LabeledExample& ex) const {
  const LabeledExample* p = &ex;
  ForwardTrace t;
  forward(std::span<const LabeledExample* const>(&p, 1), Mode::eval, nullptr, t);
  AttentionDump d;
  if (cfg_.variant == Variant::dstn_s || cfg_.variant == Variant::dstn_i)
    for (std::size_t s = 0; s < 3; ++s)
      if (t.groups[s].enabled) d.alpha[s] = t.groups[s].alpha;
  return d;
}

Vector Model::head(const Matrix& m) const {
  require(cfg_.variant != Variant::lr && m.cols() == fused_dim_, "head: shape mismatch");
  Matrix cur = m;
  for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
    Matrix next(m.rows(), cfg_.hidden[l]);
    broadcast_rows(next, params_[fc_b_[l]].value.values());
    matmul_nt_acc(cur, params_[fc_w_[l]].value, next);
    simd::relu(next.data(), next.size());
    cur = std::move(next);
  }
  Vector y(m.rows());
  const Matrix& w_out = params_[out_w_].value;
  for (std::size_t b = 0; b < m.rows(); ++b)
    y[b] = sigmoid(simd::dot(cur.row(b).data(), w_out.data(), w_out.cols()) + params_[out_b_].value(0, 0));
  return y;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void Model::save(std::ostream& os, std::uint64_t vocab_hash) const {
  os << "dstn-checkpoint 1\n";
  os << "variant " << to_string(cfg_.variant) << '\n';
  os << "schema_hash " << hex64(schema_.hash()) << '\n';
  os << "vocab_hash " << hex64(vocab_hash) << '\n';
  os << "vocab_size " << vocab_size_ << '\n';
  os << "embedding_dim " << cfg_.embedding_dim << '\n';
  os << "hidden";
  for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) os << (i ? ',' : ' ') << cfg_.hidden[i];
  if (cfg_.hidden.empty()) os << " -";
  os << '\n';
  os << "attention_dim " << cfg_.attention_dim << '\n';
  os << "dropout " << format_double(cfg_.dropout) << '\n';
  os << "attention_clamp " << format_double(cfg_.attention_clamp) << '\n';
  os << "aux " << cfg_.use_aux[0] << ',' << cfg_.use_aux[1] << ',' << cfg_.use_aux[2] << '\n';
  for (const Param& p : params_) write_tensor(os, p.name, p.value.rows(), p.value.cols(), p.value.values());
  os << "end\n";
}

Model Model::load(std::istream& is, const Schema& schema, std::uint64_t vocab_hash) {
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(is, line)) throw ParseError("checkpoint truncated");
    return line;
  };
  auto value_of = [&](const std::string& key) -> std::string {
    const std::string l = next_line();
    if (l.rfind(key + " ", 0) != 0) throw ParseError("checkpoint: expected '" + key + "'");
    return l.substr(key.size() + 1);
  };
  if (next_line() != "dstn-checkpoint 1") throw ParseError("not a dstn checkpoint (version 1)");
  ModelConfig cfg;
  cfg.variant = parse_variant(value_of("variant"));
  if (value_of("schema_hash") != hex64(schema.hash()))
    throw ContractViolation("checkpoint was trained with a different schema");
  if (value_of("vocab_hash") != hex64(vocab_hash))
    throw ContractViolation("checkpoint was trained with a different vocabulary");
  const std::size_t vocab_size = std::stoull(value_of("vocab_size"));
  cfg.embedding_dim = std::stoull(value_of("embedding_dim"));
  cfg.hidden.clear();
  if (const std::string h = value_of("hidden"); h != "-") {
    std::stringstream ss(h);
    std::string tok;
    while (std::getline(ss, tok, ',')) cfg.hidden.push_back(std::stoull(tok));
  }
  cfg.attention_dim = std::stoull(value_of("attention_dim"));
  cfg.dropout = std::stod(value_of("dropout"));
  cfg.attention_clamp = std::stod(value_of("attention_clamp"));
  {
    const std::string a = value_of("aux");
    if (a.size() != 5) throw ParseError("checkpoint: bad aux flags");
    cfg.use_aux = {a[0] == '1', a[2] == '1', a[4] == '1'};
  }
  Model model(cfg, schema, vocab_size, 0);
  for (Param& p : model.params_) {
    NamedTensor t = parse_tensor(next_line());
    if (t.name != p.name || t.rows != p.value.rows() || t.cols != p.value.cols())
      throw ParseError("checkpoint tensor '" + t.name + "' does not match expected '" + p.name + "'");
    p.value = Matrix(t.rows, t.cols, std::move(t.values));
  }
  if (next_line() != "end") throw ParseError("checkpoint: missing 'end'");
  return model;
}

std::pair<double, ForwardTrace> forward(const Model& model, const LabeledExample& ex, Mode mode,
                                        Rng* rng) {
  const LabeledExample* p = &ex;
  ForwardTrace t;
  model.forward(std::span<const LabeledExample* const>(&p, 1), mode, rng, t);
  return {t.yhat[0], std::move(t)};
}

double loss(std::span<const double> yhat, std::span<const int> labels) {
  require(yhat.size() == labels.size() && !yhat.empty(), "loss: size mismatch or empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < yhat.size(); ++i) {
    require(yhat[i] > 0.0 && yhat[i] < 1.0, "loss: prediction outside (0, 1)");
    require(labels[i] == 0 || labels[i] == 1, "loss: label must be 0 or 1");
    s += labels[i] ? std::log(yhat[i]) : std::log1p(-yhat[i]);
  }
  return -s / static_cast<double>(yhat.size());
}

double loss_from_logits(std::span<const double> logits, std::span<const int> labels) {
  require(logits.size() == labels.size() && !logits.empty(), "loss: size mismatch or empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, "loss: label must be 0 or 1");
    const double z = logits[i];
    s += std::max(z, 0.0) - labels[i] * z + std::log1p(std::exp(-std::abs(z)));
  }
  return s / static_cast<double>(logits.size());
}

}  // namespace dstn

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dstn/embedding.hpp"
#include "dstn/ingest.hpp"
#include "dstn/numerics.hpp"
#include "dstn/schema.hpp"

namespace dstn {

enum class Variant { lr, dnn, dstn_p, dstn_s, dstn_i };

/// Command-line spelling: lr, dnn, dstn-p, dstn-s, dstn-i.
std::string_view to_string(Variant v);
/// Display name: LR, DNN, DSTN-P, DSTN-S, DSTN-I.
std::string_view display_name(Variant v);
Variant parse_variant(std::string_view s);

inline constexpr std::size_t aux_slot(AdGroup g) { return static_cast<std::size_t>(g) - 1; }

struct ModelConfig {
  Variant variant = Variant::dstn_i;
  std::size_t embedding_dim = 10;
  std::vector<std::size_t> hidden{512, 256};
  std::size_t attention_dim = 128;
  double dropout = 0.5;
  /// Which auxiliary groups feed the model (contextual, clicked, unclicked).
  /// Only consulted by the DSTN variants.
  std::array<bool, 3> use_aux{true, true, true};
  double embedding_init_scale = 0.01;
  /// Upper bound on the pre-exponent score of interactive attention.
  double attention_clamp = 30.0;

  bool uses_aux() const noexcept {
    return variant == Variant::dstn_p || variant == Variant::dstn_s || variant == Variant::dstn_i;
  }
  bool group_enabled(AdGroup g) const noexcept { return uses_aux() && use_aux[aux_slot(g)]; }
};

// ---------------------------------------------------------------------------
// Stand-alone aggregation operators over one example's ads.

/// Entrywise sum; zero vector of `dim` for an empty list. All ads must share
/// one group and have size `dim`.
Vector aggregate_pooling(std::span<const InstanceEmbedding> ads, std::size_t dim);

/// beta_i = h . ReLU(W1 x_i + b1) + b2
struct SelfAttentionParams {
  Matrix w1;
  Vector b1;
  Vector h;
  double b2 = 0.0;
};

/// alpha_i = exp(min(clamp, h . ReLU(W [x_t, x_i] + b1) + b2))
struct InteractiveAttentionParams {
  Matrix w;
  Vector b1;
  Vector h;
  double b2 = 0.0;
  double clamp = 30.0;
};

struct AttentionResult {
  Vector output;
  Vector weights;
};

/// Softmax-weighted sum. Requires a non-empty list.
AttentionResult aggregate_self_attention(std::span<const InstanceEmbedding> ads,
                                         const SelfAttentionParams& p);

/// Unnormalized target-conditioned weights; empty list gives a zero vector
/// of size `dim` and no weights.
AttentionResult aggregate_interactive_attention(const InstanceEmbedding& target,
                                                std::span<const InstanceEmbedding> ads,
                                                const InteractiveAttentionParams& p,
                                                std::size_t dim);

// ---------------------------------------------------------------------------

struct Param {
  std::string name;
  Matrix value;
};

/// Named parameter tensors in a fixed order; index 0 is the embedding table.
class ParamSet {
 public:
  std::size_t add(std::string name, Matrix value);
  std::size_t size() const noexcept { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  /// Index of a tensor by name, or size() if absent.
  std::size_t index_of(std::string_view name) const;
  Matrix& at(std::string_view name);
  const Matrix& at(std::string_view name) const;
  std::size_t scalar_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<Param> params_;
};

/// Gradient storage mirroring a ParamSet. The embedding gradient is sparse.
struct Gradients {
  RowGradientBuffer embedding;
  /// dense[i] matches params[i] for i >= 1; dense[0] is unused.
  std::vector<Matrix> dense;

  void clear();
};

/// Activations cached by Model::forward for one batch.
struct ForwardTrace {
  struct Group {
    bool enabled = false;
    std::size_t dim = 0;
    Matrix ads;                          // P x D, every ad of the batch
    std::vector<std::uint32_t> offsets;  // B + 1, rows of example b
    Matrix input;                        // P x (Dt + D), interactive attention only
    Matrix hidden;                       // P x A after ReLU
    Vector score;                        // P, pre-softmax / pre-exp score
    Vector alpha;                        // P
    Matrix agg;                          // B x D
  };

  std::size_t batch = 0;
  Mode mode = Mode::eval;
  Matrix target;  // B x Dt
  std::array<Group, 3> groups;
  Matrix m;                  // B x Dm
  std::vector<Matrix> act;   // per hidden layer, after ReLU
  std::vector<Matrix> mask;  // per hidden layer, dropout scale (train mode)
  std::vector<Matrix> out;   // per hidden layer, after dropout
  Vector logit;
  Vector yhat;
};

/// Attention weights for one example, per auxiliary group (empty for
/// pooling and disabled groups).
struct AttentionDump {
  std::array<Vector, 3> alpha;
};

class Model {
 public:
  /// Fresh model with randomly initialized parameters. Dense weights are
  /// Glorot-uniform, biases zero, embeddings uniform in +-embedding_init_scale.
  Model(ModelConfig cfg, const Schema& schema, std::size_t vocab_size, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  Variant variant() const noexcept { return cfg_.variant; }
  const Schema& schema() const noexcept { return schema_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }
  std::size_t group_dim(AdGroup g) const noexcept { return dims_[static_cast<int>(g)]; }
  std::size_t fused_dim() const noexcept { return fused_dim_; }

  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  /// Batched forward. `rng` is required in train mode when dropout > 0.
  void forward(std::span<const LabeledExample* const> batch, Mode mode, Rng* rng,
               ForwardTrace& trace) const;

  /// Gradient of the batch-mean logistic loss, accumulated into `grads`
  /// (callers clear between steps).
  void backward(const ForwardTrace& trace, std::span<const LabeledExample* const> batch,
                Gradients& grads) const;

  Gradients make_gradients() const;

  /// Eval-mode pCTR.
  double predict(const LabeledExample& ex) const;
  /// Batches are spread over `threads` workers (0: one per hardware thread).
  std::vector<double> predict(std::span<const LabeledExample> examples, std::size_t batch_size = 256,
                              std::size_t threads = 0) const;
  AttentionDump attention(const LabeledExample& ex) const;

  /// Runs the fully connected head on a fused batch m (B x Dm) in eval mode.
  Vector head(const Matrix& m) const;

  /// Checkpoint: header lines, one tensor record per parameter, `end`.
  void save(std::ostream& os, std::uint64_t vocab_hash) const;
  static Model load(std::istream& is, const Schema& schema, std::uint64_t vocab_hash);

 private:
  void init_params(std::uint64_t seed);
  void check_example(const LabeledExample& ex) const;

  ModelConfig cfg_;
  Schema schema_;
  std::size_t vocab_size_;
  std::array<std::size_t, 4> dims_{};
  std::size_t fused_dim_ = 0;
  ParamSet params_;

  std::vector<std::size_t> fc_w_, fc_b_;
  std::size_t out_w_ = 0, out_b_ = 0, lr_bias_ = 0;
  std::array<std::size_t, 3> att_w_{}, att_b1_{}, att_h_{}, att_b2_{};
};

/// Single-example forward.
std::pair<double, ForwardTrace> forward(const Model& model, const LabeledExample& ex, Mode mode,
                                        Rng* rng);

/// Mean logistic loss. Every yhat must lie strictly inside (0, 1).
double loss(std::span<const double> yhat, std::span<const int> labels);

/// The same loss computed from logits; finite even where the sigmoid rounds
/// to 0 or 1.
double loss_from_logits(std::span<const double> logits, std::span<const int> labels);

}  // namespace dstn

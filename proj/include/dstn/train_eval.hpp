#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dstn/models.hpp"

namespace dstn {

struct TrainConfig {
  ModelConfig model;
  std::size_t batch_size = 128;
  std::size_t epochs = 3;
  double learning_rate = 0.01;
  double adagrad_eps = 1e-8;
  /// Epochs without validation-AUC improvement before stopping.
  std::size_t patience = 1;
  std::uint64_t seed = 42;
};

/// JSON keys: variant, batch_size, epochs, learning_rate, adagrad_eps,
/// dropout, embedding_dim, hidden, attention_dim, patience, seed, aux
/// (subset of ["ctx","clk","unclk"]). Missing keys keep their defaults.
TrainConfig load_train_config(const std::string& path);
TrainConfig parse_train_config(const std::string& json_text);
std::string to_json(const TrainConfig& cfg);

/// Parses "ctx", "clk" or "unclk".
AdGroup parse_aux_group(std::string_view s);
std::string_view aux_short_name(AdGroup g);

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
  double val_logloss = 0.0;
};

/// Mini-batch Adagrad on the mean logistic loss. Embedding rows are updated
/// only when touched by the batch.
class Trainer {
 public:
  Trainer(Model& model, double learning_rate, double eps);

  /// One step on `batch`; returns the batch loss before the update.
  double step(std::span<const LabeledExample* const> batch, Rng& dropout_rng);

  const Gradients& last_gradients() const noexcept { return grads_; }
  const std::vector<AdagradState>& state() const noexcept { return state_; }

 private:
  Model& model_;
  std::vector<AdagradState> state_;
  Gradients grads_;
  ForwardTrace trace_;
};

struct TrainResult {
  Model model;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_val_auc = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Shuffles per epoch with the seeded RNG and keeps the parameters with the
/// best validation AUC (the last epoch's when validation is empty or
/// single-class). `warm_start`, if given, supplies the initial parameters.
/// Throws std::invalid_argument on an empty training stream.
TrainResult train(const TrainConfig& cfg, const Schema& schema, std::size_t vocab_size,
                  std::span<const LabeledExample> train_set,
                  std::span<const LabeledExample> validation,
                  const Model* warm_start = nullptr, const EpochCallback& on_epoch = {});

/// Probability that a random positive outranks a random negative; ties
/// count one half. Sort-based with midranks. Throws UndefinedMetric when
/// either class is absent.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Mean logistic loss with scores clamped to [1e-12, 1 - 1e-12].
double logloss_eval(std::span<const double> scores, std::span<const int> labels);

struct ImprovementMetrics {
  double abs_imp = 0.0;
  std::optional<double> nlz_imp;

  /// Throws UndefinedMetric when the average auxiliary count was <= 0.
  double nlz() const;
};

ImprovementMetrics improvement_metrics(double auc_variant, double auc_dnn, double avg_aux_count);

/// Mean number of ads of group `g` per example.
double average_aux_count(std::span<const LabeledExample> examples, AdGroup g);

struct EvalReport {
  std::string variant;
  double auc = 0.0;
  double logloss = 0.0;
  std::size_t n = 0;

  /// `auc=<v> logloss=<v> n=<v>`
  std::string summary_line() const;
  /// `key=value` lines.
  std::string key_values() const;
};

EvalReport evaluate(const Model& model, std::span<const LabeledExample> test);

/// Copies the examples keeping only the enabled auxiliary groups.
std::vector<LabeledExample> restrict_aux(std::span<const LabeledExample> examples,
                                         const std::array<bool, 3>& keep);

struct GradCheckSpec {
  Variant variant = Variant::dstn_i;
  std::size_t embedding_dim = 3;
  std::vector<std::size_t> hidden{8, 4};
  std::size_t attention_dim = 4;
  std::size_t examples = 10;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Parameters are redrawn uniformly from [-init_scale, init_scale].
  double init_scale = 0.5;
  std::uint64_t seed = 7;
};

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  /// ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, 1e-6)
  double rel_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  Variant variant = Variant::dstn_i;
  std::vector<TensorCheck> tensors;
  bool passed = false;
};

/// Compares backward() against central finite differences over every
/// parameter entry on a random batch, with dropout disabled.
GradCheckReport grad_check(const GradCheckSpec& spec);

/// Random schema, vocabulary and encoded examples used by grad_check.
struct RandomProblem {
  Schema schema;
  std::size_t vocab_size = 0;
  std::vector<LabeledExample> examples;
};
RandomProblem make_random_problem(std::size_t examples, std::uint64_t seed);

/// A model with the schema and vocabulary it was trained against. On disk:
/// `<path>` (tensors), `<path>.schema.tsv` and `<path>.vocab.tsv`.
struct Checkpoint {
  Schema schema;
  Vocabulary vocab;
  Model model;
};

void save_checkpoint(const std::string& path, const Model& model, const Vocabulary& vocab);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dstn

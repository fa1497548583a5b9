#include "dstn/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dstn/error.hpp"

namespace dstn {

AdGroup parse_aux_group(std::string_view s) {
  if (s == "ctx" || s == "contextual") return AdGroup::contextual;
  if (s == "clk" || s == "clicked") return AdGroup::clicked;
  if (s == "unclk" || s == "unclicked") return AdGroup::unclicked;
  throw std::invalid_argument("unknown auxiliary group '" + std::string(s) + "'");
}

std::string_view aux_short_name(AdGroup g) {
  switch (g) {
    case AdGroup::contextual: return "ctx";
    case AdGroup::clicked: return "clk";
    case AdGroup::unclicked: return "unclk";
    case AdGroup::target: break;
  }
  return "target";
}

TrainConfig parse_train_config(const std::string& json_text) {
  const nlohmann::json j = nlohmann::json::parse(json_text);
  TrainConfig c;
  if (j.contains("variant")) c.model.variant = parse_variant(j.at("variant").get<std::string>());
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("learning_rate", c.learning_rate);
  get("adagrad_eps", c.adagrad_eps);
  get("patience", c.patience);
  get("seed", c.seed);
  get("dropout", c.model.dropout);
  get("embedding_dim", c.model.embedding_dim);
  get("hidden", c.model.hidden);
  get("attention_dim", c.model.attention_dim);
  get("embedding_init_scale", c.model.embedding_init_scale);
  if (j.contains("aux")) {
    c.model.use_aux = {false, false, false};
    for (const auto& g : j.at("aux")) c.model.use_aux[aux_slot(parse_aux_group(g.get<std::string>()))] = true;
  }
  if (c.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (c.learning_rate < 0) throw std::invalid_argument("learning_rate must be non-negative");
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["variant"] = std::string(to_string(c.model.variant));
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["learning_rate"] = c.learning_rate;
  j["adagrad_eps"] = c.adagrad_eps;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["dropout"] = c.model.dropout;
  j["embedding_dim"] = c.model.embedding_dim;
  j["hidden"] = c.model.hidden;
  j["attention_dim"] = c.model.attention_dim;
  j["embedding_init_scale"] = c.model.embedding_init_scale;
  auto aux = nlohmann::json::array();
  for (AdGroup g : kAuxGroups)
    if (c.model.use_aux[aux_slot(g)]) aux.push_back(std::string(aux_short_name(g)));
  j["aux"] = aux;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

Trainer::Trainer(Model& model, double learning_rate, double eps)
    : model_(model), grads_(model.make_gradients()) {
  state_.reserve(model.params().size());
  for (const Param& p : model.params()) state_.emplace_back(p.value.size(), learning_rate, eps);
}

double Trainer::step(std::span<const LabeledExample* const> batch, Rng& dropout_rng) {
  model_.forward(batch, Mode::train, &dropout_rng, trace_);
  std::vector<int> labels(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = batch[i]->label;
  const double batch_loss = loss_from_logits(trace_.logit, labels);

  grads_.clear();
  model_.backward(trace_, batch, grads_);

  ParamSet& params = model_.params();
  Matrix& table = params[0].value;
  const std::size_t k = table.cols();
  for (std::uint32_t r : grads_.embedding.touched())
    adagrad_step(table.row(r), grads_.embedding.row(r), state_[0], static_cast<std::size_t>(r) * k);
  for (std::size_t i = 1; i < params.size(); ++i)
    adagrad_step(params[i].value.values(), grads_.dense[i].values(), state_[i]);
  return batch_loss;
}

namespace {

bool has_both_classes(std::span<const LabeledExample> xs) {
  bool pos = false, neg = false;
  for (const LabeledExample& e : xs) (e.label ? pos : neg) = true;
  return pos && neg;
}

std::vector<int> labels_of(std::span<const LabeledExample> xs) {
  std::vector<int> y;
  y.reserve(xs.size());
  for (const LabeledExample& e : xs) y.push_back(e.label);
  return y;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Schema& schema, std::size_t vocab_size,
                  std::span<const LabeledExample> train_set,
                  std::span<const LabeledExample> validation, const Model* warm_start,
                  const EpochCallback& on_epoch) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training stream");
  require(cfg.batch_size > 0, "train: batch_size must be positive");
  const Rng root(cfg.seed);
  TrainResult result{Model(cfg.model, schema, vocab_size, root.fork(1).next_u64()), {}, 0, 0.0};
  Model& model = result.model;
  if (warm_start != nullptr) {
    require(warm_start->params().size() == model.params().size(), "train: warm start layout mismatch");
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      require(warm_start->params()[i].value.rows() == model.params()[i].value.rows() &&
                  warm_start->params()[i].value.cols() == model.params()[i].value.cols(),
              "train: warm start shape mismatch");
      model.params()[i].value = warm_start->params()[i].value;
    }
  }

  Trainer trainer(model, cfg.learning_rate, cfg.adagrad_eps);
  const bool can_validate = has_both_classes(validation);
  const std::vector<int> val_labels = labels_of(validation);
  ParamSet best = model.params();
  double best_auc = -1.0;
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  std::vector<const LabeledExample*> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = root.fork(1000 + epoch);
    shuffle_rng.shuffle(order);
    Rng dropout_rng = root.fork(2000 + epoch);

    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      batch.clear();
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&train_set[order[i]]);
      loss_sum += trainer.step(batch, dropout_rng) * static_cast<double>(hi - lo);
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.train_loss = loss_sum / static_cast<double>(train_set.size());
    if (can_validate) {
      const std::vector<double> scores = model.predict(validation);
      stats.val_auc = auc(scores, val_labels);
      stats.val_logloss = logloss_eval(scores, val_labels);
    }
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);

    if (!can_validate || stats.val_auc > best_auc) {
      best_auc = stats.val_auc;
      best = model.params();
      result.best_epoch = stats.epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  model.params() = std::move(best);
  result.best_val_auc = can_validate ? best_auc : 0.0;
  return result;
}

// ---------------------------------------------------------------------------

double auc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), "auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    // Ranks i+1..j share the midrank (i + 1 + j) / 2.
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      const int y = labels[idx[t]];
      require(y == 0 || y == 1, "auc: label must be 0 or 1");
      if (y) {
        pos += 1.0;
        rank_sum += midrank;
      } else {
        neg += 1.0;
      }
    }
    i = j;
  }
  if (pos == 0.0 || neg == 0.0) throw UndefinedMetric("auc: need at least one positive and one negative");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double logloss_eval(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size() && !scores.empty(), "logloss: size mismatch or empty");
  constexpr double kLo = 1e-12, kHi = 1.0 - 1e-12;
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, "logloss: label must be 0 or 1");
    const double p = std::clamp(scores[i], kLo, kHi);
    s += labels[i] ? std::log(p) : std::log1p(-p);
  }
  return -s / static_cast<double>(scores.size());
}

double ImprovementMetrics::nlz() const {
  if (!nlz_imp) throw UndefinedMetric("NlzImp: average auxiliary count must be positive");
  return *nlz_imp;
}

ImprovementMetrics improvement_metrics(double auc_variant, double auc_dnn, double avg_aux_count) {
  ImprovementMetrics m;
  m.abs_imp = auc_variant - auc_dnn;
  if (avg_aux_count > 0.0) m.nlz_imp = m.abs_imp / avg_aux_count;
  return m;
}

double average_aux_count(std::span<const LabeledExample> examples, AdGroup g) {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const LabeledExample& e : examples) total += static_cast<double>(e.aux(g).size());
  return total / static_cast<double>(examples.size());
}

std::string EvalReport::summary_line() const {
  return "auc=" + format_double(auc) + " logloss=" + format_double(logloss) + " n=" + std::to_string(n);
}

std::string EvalReport::key_values() const {
  return "variant=" + variant + "\nauc=" + format_double(auc) + "\nlogloss=" + format_double(logloss) +
         "\nn=" + std::to_string(n) + "\n";
}

EvalReport evaluate(const Model& model, std::span<const LabeledExample> test) {
  EvalReport r;
  r.variant = std::string(display_name(model.variant()));
  const std::vector<double> scores = model.predict(test);
  const std::vector<int> labels = labels_of(test);
  r.auc = auc(scores, labels);
  r.logloss = logloss_eval(scores, labels);
  r.n = test.size();
  return r;
}

std::vector<LabeledExample> restrict_aux(std::span<const LabeledExample> examples,
                                         const std::array<bool, 3>& keep) {
  std::vector<LabeledExample> out(examples.begin(), examples.end());
  for (LabeledExample& e : out)
    for (AdGroup g : kAuxGroups)
      if (!keep[aux_slot(g)]) e.aux(g).clear();
  return out;
}

// ---------------------------------------------------------------------------

RandomProblem make_random_problem(std::size_t examples, std::uint64_t seed) {
  RandomProblem p;
  auto uni = [](const char* n) { return FieldSchema{n, FieldKind::univalent, {}}; };
  auto multi = [](const char* n) { return FieldSchema{n, FieldKind::multivalent, {}}; };
  p.schema.group(AdGroup::target).fields = {uni("user"), multi("title"),
                                            FieldSchema{"age", FieldKind::numerical, {20, 40}}};
  for (AdGroup g : kAuxGroups) p.schema.group(g).fields = {uni("ad"), multi("title")};
  p.schema.validate();

  // Index ranges per field: OOV block 0..3, then tokens.
  struct Range {
    std::uint32_t lo, count;
  };
  const Range user{4, 4}, title{8, 8}, age{16, 3}, ad{19, 6};
  p.vocab_size = 25;

  Rng rng(seed);
  auto pick = [&](Range r) { return static_cast<std::uint32_t>(r.lo + rng.below(r.count)); };
  auto bag = [&](Range r) {
    std::vector<std::uint32_t> v(rng.below(4));
    for (auto& x : v) x = pick(r);
    return v;
  };
  for (std::size_t i = 0; i < examples; ++i) {
    LabeledExample e;
    e.label = static_cast<int>(rng.below(2));
    e.timestamp = static_cast<std::int64_t>(i);
    e.user_id = "u" + std::to_string(i);
    e.target.group = AdGroup::target;
    const std::uint32_t u = pick(user), a = pick(age);
    e.target.push_field(std::span(&u, 1));
    e.target.push_field(bag(title));
    e.target.push_field(std::span(&a, 1));
    for (AdGroup g : kAuxGroups) {
      const std::size_t n = 1 + rng.below(3);
      for (std::size_t k = 0; k < n; ++k) {
        EncodedInstance inst;
        inst.group = g;
        const std::uint32_t id = pick(ad);
        inst.push_field(std::span(&id, 1));
        inst.push_field(bag(title));
        e.aux(g).push_back(std::move(inst));
      }
    }
    p.examples.push_back(std::move(e));
  }
  return p;
}

GradCheckReport grad_check(const GradCheckSpec& spec) {
  RandomProblem prob = make_random_problem(spec.examples, spec.seed);
  ModelConfig cfg;
  cfg.variant = spec.variant;
  cfg.embedding_dim = spec.embedding_dim;
  cfg.hidden = spec.hidden;
  cfg.attention_dim = spec.attention_dim;
  cfg.dropout = 0.0;
  Model model(cfg, prob.schema, prob.vocab_size, spec.seed + 1);
  Rng init(spec.seed + 2);
  for (Param& p : model.params())
    for (double& v : p.value.values()) v = init.uniform(-spec.init_scale, spec.init_scale);

  std::vector<const LabeledExample*> batch;
  std::vector<int> labels;
  for (const LabeledExample& e : prob.examples) {
    batch.push_back(&e);
    labels.push_back(e.label);
  }
  ForwardTrace trace;
  model.forward(batch, Mode::train, nullptr, trace);
  Gradients grads = model.make_gradients();
  model.backward(trace, batch, grads);

  auto batch_loss = [&]() {
    ForwardTrace t;
    model.forward(batch, Mode::eval, nullptr, t);
    return loss(t.yhat, labels);
  };

  GradCheckReport report;
  report.variant = spec.variant;
  report.passed = true;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    Matrix& value = model.params()[i].value;
    const Matrix& analytic = i == 0 ? grads.embedding.dense() : grads.dense[i];
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double saved = value.data()[k];
      value.data()[k] = saved + spec.step;
      const double up = batch_loss();
      value.data()[k] = saved - spec.step;
      const double down = batch_loss();
      value.data()[k] = saved;
      const double numeric = (up - down) / (2.0 * spec.step);
      const double a = analytic.data()[k];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    TensorCheck tc;
    tc.name = model.params()[i].name;
    tc.entries = value.size();
    tc.rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-6});
    tc.passed = tc.rel_error <= spec.tolerance;
    report.passed = report.passed && tc.passed;
    report.tensors.push_back(std::move(tc));
  }
  return report;
}

void save_checkpoint(const std::string& path, const Model& model, const Vocabulary& vocab) {
  save_schema(model.schema(), path + ".schema.tsv");
  {
    std::ofstream vs(path + ".vocab.tsv");
    if (!vs) throw std::runtime_error("cannot write " + path + ".vocab.tsv");
    vocab.write(vs);
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  model.save(os, vocab.hash());
  if (!os) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  Schema schema = load_schema(path + ".schema.tsv");
  std::ifstream vs(path + ".vocab.tsv");
  if (!vs) throw std::runtime_error("cannot read " + path + ".vocab.tsv");
  Vocabulary vocab = Vocabulary::read(vs);
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  Model model = Model::load(is, schema, vocab.hash());
  return Checkpoint{std::move(schema), std::move(vocab), std::move(model)};
}

}  // namespace dstn

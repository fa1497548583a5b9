// Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "dstn/ingest.hpp"
#include "dstn/serving.hpp"
#include "dstn/session.hpp"
#include "dstn/simd/kernels.hpp"
#include "dstn/train_eval.hpp"
#include "oracles.hpp"

using namespace dstn;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const std::string& title, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " [" << id << "] " << title << ": " << detail << std::endl;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

void gradient_correctness() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (Variant v : {Variant::lr, Variant::dnn, Variant::dstn_p, Variant::dstn_s, Variant::dstn_i}) {
    GradCheckSpec spec;  // K=3, FC 8/4, attention 4, 10 examples, dropout off
    spec.variant = v;
    spec.tolerance = 1e-4;
    const GradCheckReport r = grad_check(spec);
    double worst = 0;
    for (const TensorCheck& t : r.tensors) worst = std::max(worst, t.rel_error);
    ok = ok && r.passed;
    detail += std::string(display_name(v)) + " max_rel=" + fmt(worst, 10) + "; ";
  }
  const double secs = seconds_since(t0);
  report(2, "gradient correctness", ok && secs < 60.0, detail + "time=" + fmt(secs, 2) + "s (limit 60s)");
}

void reduction_equivalence() {
  const RandomProblem prob = make_random_problem(1000, 2024);
  ModelConfig cfg;
  cfg.embedding_dim = 6;
  cfg.hidden = {32, 16};
  cfg.attention_dim = 8;
  cfg.embedding_init_scale = 0.5;
  cfg.variant = Variant::dstn_p;
  const Model pooled(cfg, prob.schema, prob.vocab_size, 1);
  cfg.variant = Variant::dstn_i;
  Model inter(cfg, prob.schema, prob.vocab_size, 2);
  for (Param& p : inter.params()) {
    if (!p.name.starts_with("inter."))
      p.value = pooled.params().at(p.name);
    else if (p.name.ends_with(".h") || p.name.ends_with(".b2"))
      p.value.fill(0.0);
  }
  const auto a = pooled.predict(prob.examples), b = inter.predict(prob.examples);
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  report(3, "reduction equivalence", worst <= 1e-12,
         "max |DSTN-I - DSTN-P| = " + fmt(worst, 16) + " on 1000 examples (limit 1e-12)");
}

// Shared by criteria 4, 5 and 10.
struct SyntheticRun {
  Schema schema;
  Vocabulary vocab;
  std::vector<LabeledExample> train, val, test;
};

struct VariantRun {
  EvalReport report;
  double seconds = 0;
};

VariantRun train_and_eval(const SyntheticRun& d, Variant v, std::array<bool, 3> aux, const fs::path& ckpt) {
  const auto t0 = Clock::now();
  TrainConfig cfg;
  cfg.model.variant = v;
  cfg.model.use_aux = aux;
  const TrainResult res = train(cfg, d.schema, d.vocab.size(), d.train, d.val);
  save_checkpoint(ckpt.string(), res.model, d.vocab);
  VariantRun run{evaluate(res.model, d.test), 0};
  std::ofstream(ckpt.string() + ".eval.txt", std::ios::binary) << run.report.key_values();
  run.seconds = seconds_since(t0);
  std::cout << "  " << display_name(v) << " aux=" << aux[0] << aux[1] << aux[2] << ' ' << run.report.summary_line()
            << " time=" << fmt(run.seconds, 1) << "s" << std::endl;
  return run;
}

void ordering_ablation_determinism() {
  const fs::path work = fs::current_path() / "acceptance_work";
  fs::remove_all(work);
  fs::create_directories(work);

  const auto t0 = Clock::now();
  const SyntheticConfig scfg;  // defaults: 100k / 10k / 10k, fixed seed
  const SyntheticDataset ds = generate_synthetic(scfg);
  SyntheticRun d;
  d.schema = ds.schema;
  d.vocab = build_vocabulary(ds.train.examples, ds.schema);
  d.train = encode_all(ds.train.examples, ds.schema, d.vocab);
  d.val = encode_all(ds.validation.examples, ds.schema, d.vocab);
  d.test = encode_all(ds.test.examples, ds.schema, d.vocab);
  std::cout << "  synthetic set: train=" << d.train.size() << " val=" << d.val.size() << " test=" << d.test.size()
            << " vocab=" << d.vocab.size() << " simd=" << simd::active().name << std::endl;

  const std::array<bool, 3> all{true, true, true};
  const VariantRun dnn = train_and_eval(d, Variant::dnn, all, work / "dnn.ckpt");
  const VariantRun p = train_and_eval(d, Variant::dstn_p, all, work / "dstn_p.ckpt");
  const VariantRun s = train_and_eval(d, Variant::dstn_s, all, work / "dstn_s.ckpt");
  const VariantRun i = train_and_eval(d, Variant::dstn_i, all, work / "dstn_i.ckpt");
  const double secs = seconds_since(t0);
  const double a_dnn = dnn.report.auc, a_p = p.report.auc, a_s = s.report.auc, a_i = i.report.auc;
  const bool order = a_i >= a_s && a_s >= a_p && a_p >= a_dnn + 0.01 && a_i - a_dnn >= 0.02;
  report(4, "ordering on the synthetic set", order && secs < 600.0,
         "AUC DNN=" + fmt(a_dnn) + " DSTN-P=" + fmt(a_p) + " DSTN-S=" + fmt(a_s) + " DSTN-I=" + fmt(a_i) +
             " (need I>=S>=P>=DNN+0.01, I-DNN>=0.02); time=" + fmt(secs, 1) + "s (limit 600s)");

  // Single auxiliary group ablations.
  bool abs_ok = true;
  std::map<AdGroup, ImprovementMetrics> imp;
  std::string detail;
  for (AdGroup g : kAuxGroups) {
    std::array<bool, 3> only{false, false, false};
    only[aux_slot(g)] = true;
    const std::string name(aux_short_name(g));
    const VariantRun r = train_and_eval(d, Variant::dstn_i, only, work / ("dstn_i_" + name + ".ckpt"));
    imp[g] = improvement_metrics(r.report.auc, a_dnn, average_aux_count(d.test, g));
    abs_ok = abs_ok && imp[g].abs_imp > 0.0;
    detail += name + ": AbsImp=" + fmt(imp[g].abs_imp) + " NlzImp=" + fmt(imp[g].nlz()) + "; ";
  }
  const bool nlz_ok = imp[AdGroup::clicked].nlz() > imp[AdGroup::unclicked].nlz();
  report(5, "single-group ablations", abs_ok && nlz_ok,
         detail + "need AbsImp>0 for all and NlzImp(clk)>NlzImp(unclk)");

  // A second, identical full DSTN-I run.
  const VariantRun again = train_and_eval(d, Variant::dstn_i, all, work / "dstn_i_again.ckpt");
  bool same = again.report.summary_line() == i.report.summary_line();
  for (const char* suffix : {"", ".schema.tsv", ".vocab.tsv", ".eval.txt"})
    same = same && slurp(work.string() + "/dstn_i.ckpt" + suffix) == slurp(work.string() + "/dstn_i_again.ckpt" + suffix);
  report(10, "determinism", same,
         std::string("two DSTN-I train+eval runs with seed ") + std::to_string(TrainConfig{}.seed) +
             (same ? ": checkpoint, schema, vocabulary and report files byte-identical"
                   : ": outputs differ"));
}

void auc_oracle() {
  Rng rng(606);
  double worst = 0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const std::size_t levels = 1 + rng.below(30);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
      y[k] = rng.bernoulli(0.3) ? 1 : 0;
    }
    if (std::count(y.begin(), y.end(), 1) == 0) y[0] = 1;
    if (std::count(y.begin(), y.end(), 0) == 0) y[n - 1] = 0;
    worst = std::max(worst, std::abs(auc(s, y) - oracle::auc(s, y)));
  }
  report(6, "AUC oracle", worst <= 1e-12, "max |fast - pairwise| = " + fmt(worst, 16) + " over 500 instances");
}

void logloss_spots() {
  const double a = logloss_eval(std::vector<double>{0.5}, std::vector<int>{1});
  const double b = logloss_eval(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0});
  const bool ok = std::abs(a - 0.693147) <= 1e-6 && std::abs(b - 0.105361) <= 1e-6;
  report(7, "logloss spot values", ok, "(0.5,1)=" + fmt(a, 7) + " [(0.9,1),(0.1,0)]=" + fmt(b, 7) + " (tol 1e-6)");
}

void session_oracle() {
  SessionStore store;
  oracle::SessionLog log(5, kThreeDaysSeconds);
  Rng rng(808);
  std::int64_t clock = 0;
  for (int e = 0; e < 10000; ++e) {
    clock += static_cast<std::int64_t>(rng.below(300));
    // Arrivals may be up to an hour late.
    const std::int64_t ts = std::max<std::int64_t>(0, clock - static_cast<std::int64_t>(rng.below(3600)));
    const std::string user = "u" + std::to_string(rng.below(100));
    const std::string key = "ad" + std::to_string(rng.below(500));
    const bool clicked = rng.bernoulli(0.3);
    SessionAd ad;
    ad.raw.fields = {{"ad_id", key}};
    ad.key = key;
    store.record_event(user, ad, clicked, ts);
    log.record(user, key, clicked, ts);
  }
  const std::int64_t now = clock;
  bool equal = true, bounded = true, fresh = true;
  for (int u = 0; u < 100; ++u) {
    const std::string user = "u" + std::to_string(u);
    const UserHistory h = store.get_history(user, now);
    for (bool clicked : {true, false}) {
      const auto& got = clicked ? h.clicked : h.unclicked;
      const auto want = log.query(user, clicked, now);
      bounded = bounded && got.size() <= 5;
      for (const auto& entry : got) fresh = fresh && entry.ts > now - kThreeDaysSeconds;
      bool same = got.size() == want.size();
      for (std::size_t k = 0; same && k < got.size(); ++k)
        same = got[k].ts == want[k].ts && got[k].ad.key == want[k].key;
      equal = equal && same;
    }
  }
  report(8, "session store oracle", equal && bounded && fresh,
         std::string("10000 events, 100 users, span ") + std::to_string(clock) + "s: " +
             (equal ? "all histories match" : "mismatch") + (bounded ? ", lists <= 5" : ", list over 5") +
             (fresh ? ", nothing older than 3 days" : ", stale entry returned"));
}

void serving_protocol() {
  Schema schema;
  schema.group(AdGroup::target).fields = {{"user_id", FieldKind::univalent, {}}, {"ad_id", FieldKind::univalent, {}}};
  for (AdGroup g : kAuxGroups) schema.group(g).fields = {{"ad_id", FieldKind::univalent, {}}};
  std::vector<RawRecord> records;
  for (int k = 0; k < 40; ++k) records.push_back(RawRecord{{{"ad_id", "a" + std::to_string(k)}, {"user_id", "u"}}});
  const Vocabulary vocab = build_vocabulary(records, schema);
  const AdEncoder enc(schema, vocab);
  ModelConfig mc;
  mc.variant = Variant::dstn_i;
  mc.embedding_dim = 4;
  mc.hidden = {16, 8};
  mc.attention_dim = 8;
  mc.embedding_init_scale = 1.0;
  const Model model(mc, schema, vocab.size(), 77);
  ModelScorer scorer(model);

  RawRecord profile{{{"user_id", "u"}}};
  Rng rng(909);
  SessionStore store;
  bool forwards_ok = true, winner_ok = true, stub_ok = true;
  for (int r = 0; r < 1000; ++r) {
    const std::size_t n = 2 + rng.below(9);
    std::vector<int> ids(40);
    for (int k = 0; k < 40; ++k) ids[k] = k;
    rng.shuffle(ids);
    RankRequest req{"u", r, {}, 1 + rng.below(5)};
    for (std::size_t k = 0; k < n; ++k) req.candidates.push_back(enc.candidate(profile, records[ids[k]]));
    if (rng.bernoulli(0.3))
      store.record_event("u", enc.session_ad(records[ids[0]], true), true, r);

    scorer.reset_counters();
    const RankResult res = rank_request(scorer, store, req);
    forwards_ok = forwards_ok && scorer.forwards() == n + (n - 1);

    // Round-1 winner: argmax of context-free scores, first on ties.
    std::vector<EncodedInstance> targets;
    for (const auto& c : req.candidates) targets.push_back(c.as(AdGroup::target));
    const auto round1 = score_batch(scorer, store.get_history("u", r), {}, targets);
    const std::size_t best = static_cast<std::size_t>(std::max_element(round1.begin(), round1.end()) - round1.begin());
    winner_ok = winner_ok && res.ads[0].candidate == best && res.ads[0].round == 1;

    // Context-insensitive stub: two rounds collapse to one top-slots pass.
    std::vector<double> fixed(vocab.size());
    for (double& v : fixed) v = rng.uniform();
    FunctionScorer stub([&](const EncodedInstance& c, const AuxContext&) { return fixed[c.field(1)[0]]; });
    const RankResult sres = rank_request(stub, store, req);
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t k = 0; k < n; ++k)
      order.emplace_back(-stub.score({}, std::span(&targets[k], 1))[0], k);
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    const std::size_t want = std::min(req.slots, n);
    bool same = sres.ads.size() == want;
    for (std::size_t k = 0; same && k < want; ++k) same = sres.ads[k].candidate == order[k].second;
    stub_ok = stub_ok && same;
  }
  report(9, "serving protocol", forwards_ok && winner_ok && stub_ok,
         std::string("1000 requests: ") + (forwards_ok ? "forwards = n + (n-1)" : "forward count wrong") +
             (winner_ok ? ", round-1 winner at position 0" : ", winner mismatch") +
             (stub_ok ? ", stub equals single-round top-slots" : ", stub ranking differs"));
}

}  // namespace

int main() {
  std::cout << "NOTE [1] published absolute AUC/logloss values are not reproducible at desk scale; "
               "criteria 2-10 substitute"
            << std::endl;
  const std::vector<std::function<void()>> criteria{gradient_correctness, reduction_equivalence, auc_oracle,
                                                    logloss_spots,        session_oracle,        serving_protocol,
                                                    ordering_ablation_determinism};
  for (const auto& c : criteria) {
    try {
      c();
    } catch (const std::exception& e) {
      ++failures;
      std::cout << "FAIL criterion raised: " << e.what() << std::endl;
    }
  }
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " criterion failures") << std::endl;
  return failures == 0 ? 0 : 1;
}

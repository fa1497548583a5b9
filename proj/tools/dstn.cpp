// dstn command-line front end.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "dstn/error.hpp"
#include "dstn/ingest.hpp"
#include "dstn/models.hpp"
#include "dstn/serving.hpp"
#include "dstn/session.hpp"
#include "dstn/simd/kernels.hpp"
#include "dstn/train_eval.hpp"

namespace fs = std::filesystem;
using namespace dstn;

namespace {

std::array<bool, 3> only_group(const std::string& name) {
  std::array<bool, 3> keep{false, false, false};
  keep[aux_slot(parse_aux_group(name))] = true;
  return keep;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

std::vector<LabeledExample> load_encoded(const std::string& path, const Schema& schema, const Vocabulary& vocab) {
  return encode_all(read_raw_log(path), schema, vocab);
}

int cmd_gen_data(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out,
                 std::size_t serving_candidates) {
  SyntheticConfig cfg = config.empty() ? SyntheticConfig{} : load_synthetic_config(config);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  const SyntheticDataset ds = generate_synthetic(cfg);
  write_dataset(ds, cfg, out);

  auto ads = open_out((fs::path(out) / "ads.tsv").string());
  std::set<std::string> seen;
  for (const auto* split : {&ds.train, &ds.validation, &ds.test})
    for (const auto& ex : split->examples) {
      RawRecord ad;
      for (const auto& kv : ex.target.fields)
        if (!is_profile_field(kv.first)) ad.fields.push_back(kv);
      if (seen.insert(session_ad_key(ad)).second) ads << format_fields(ad) << '\n';
    }
  auto events = open_out((fs::path(out) / "serving_events.tsv").string());
  write_serving_log(events, ds.test.examples, serving_candidates, cfg.seed);
  std::cout << "wrote " << ds.train.examples.size() << " train, " << ds.validation.examples.size() << " val, "
            << ds.test.examples.size() << " test examples to " << out << '\n';
  return 0;
}

int cmd_train(const std::string& variant, const std::string& config, const std::string& train_path,
              const std::string& val_path, const std::string& out, std::string schema_path,
              const std::string& ablate, const std::string& warm) {
  TrainConfig cfg = config.empty() ? TrainConfig{} : load_train_config(config);
  if (!variant.empty()) cfg.model.variant = parse_variant(variant);
  if (!ablate.empty()) cfg.model.use_aux = only_group(ablate);
  if (schema_path.empty()) schema_path = (fs::path(train_path).parent_path() / "schema.tsv").string();
  const Schema schema = load_schema(schema_path);

  std::optional<Checkpoint> warm_ckpt;
  const auto raw_train = read_raw_log(train_path);
  Vocabulary vocab;
  if (!warm.empty()) {
    warm_ckpt.emplace(load_checkpoint(warm));
    if (!(warm_ckpt->schema == schema)) throw ContractViolation("warm start checkpoint uses a different schema");
    vocab = warm_ckpt->vocab;
  } else {
    vocab = build_vocabulary(raw_train, schema);
  }
  const auto train_set = encode_all(raw_train, schema, vocab);
  const auto val_set = val_path.empty() ? std::vector<LabeledExample>{} : load_encoded(val_path, schema, vocab);

  std::cerr << "variant=" << to_string(cfg.model.variant) << " train=" << train_set.size()
            << " val=" << val_set.size() << " vocab=" << vocab.size() << " simd=" << simd::active().name << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res = train(cfg, schema, vocab.size(), train_set, val_set,
                          warm_ckpt ? &warm_ckpt->model : nullptr, [&](const EpochStats& e) {
                            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                            std::cerr << "epoch " << e.epoch << " train_loss=" << e.train_loss
                                      << " val_auc=" << e.val_auc << " val_logloss=" << e.val_logloss
                                      << " elapsed=" << secs << "s\n";
                          });
  save_checkpoint(out, res.model, vocab);
  std::cout << "best_epoch=" << res.best_epoch << " val_auc=" << res.best_val_auc << " checkpoint=" << out << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& test_path, const std::string& dump,
             const std::string& ablate, std::string report) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  auto test = load_encoded(test_path, ckpt.schema, ckpt.vocab);
  if (!ablate.empty()) test = restrict_aux(test, only_group(ablate));
  EvalReport rep = evaluate(ckpt.model, test);
  std::cout << rep.summary_line() << '\n';
  if (report.empty()) report = ckpt_path + ".eval.txt";
  open_out(report) << rep.key_values();
  if (!dump.empty()) {
    auto os = open_out(dump);
    os << "example\tgroup\tad_ordinal\talpha\n";
    for (std::size_t i = 0; i < test.size(); ++i) {
      const AttentionDump d = ckpt.model.attention(test[i]);
      for (AdGroup g : kAuxGroups) {
        const Vector& a = d.alpha[aux_slot(g)];
        for (std::size_t j = 0; j < a.size(); ++j)
          os << i << '\t' << to_string(g) << '\t' << j << '\t' << format_double(a[j]) << '\n';
      }
    }
  }
  return 0;
}

int cmd_gradcheck(const std::string& variant, double tol) {
  std::vector<Variant> variants;
  if (variant == "all")
    variants = {Variant::lr, Variant::dnn, Variant::dstn_p, Variant::dstn_s, Variant::dstn_i};
  else
    variants = {parse_variant(variant)};
  bool ok = true;
  for (Variant v : variants) {
    GradCheckSpec spec;
    spec.variant = v;
    spec.tolerance = tol;
    const GradCheckReport rep = grad_check(spec);
    for (const TensorCheck& t : rep.tensors)
      std::cout << display_name(v) << '\t' << t.name << '\t' << t.entries << '\t' << t.rel_error << '\t'
                << (t.passed ? "ok" : "FAIL") << '\n';
    ok = ok && rep.passed;
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << '\n';
  return ok ? 0 : 1;
}

std::unordered_map<std::string, RawRecord> read_catalog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::unordered_map<std::string, RawRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    RawRecord r = parse_fields(line, lineno);
    out.emplace(session_ad_key(r), std::move(r));
  }
  return out;
}

struct ServeArgs {
  std::string ckpt, events, out, snapshot_in, snapshot_out, catalog;
  std::size_t slots = 4;
  std::int64_t lag = 0;
  bool bid = false;
  bool stdio = false;
  int listen = -1;
};

int cmd_serve_sim(const ServeArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const AdEncoder encoder(ckpt.schema, ckpt.vocab);
  const ModelScorer scorer(ckpt.model);
  SessionStore store;
  if (!a.snapshot_in.empty()) {
    std::ifstream in(a.snapshot_in);
    if (!in) throw std::runtime_error("cannot read " + a.snapshot_in);
    store.restore(in, [&](const RawRecord& r, AdGroup g) { return encoder.encode(r, g); });
  }

  if (!a.events.empty()) {
    std::ifstream in(a.events);
    if (!in) throw std::runtime_error("cannot read " + a.events);
    const auto log = parse_serving_log(in, encoder);
    ReplayOptions opts;
    opts.slots = a.slots;
    opts.lag_seconds = a.lag;
    opts.rank.bid_weighted = a.bid;
    const auto results = replay_session(scorer, store, log, opts);
    if (a.out.empty()) {
      write_results(std::cout, results);
    } else {
      auto os = open_out(a.out);
      write_results(os, results);
    }
    std::cerr << "requests=" << results.size() << " batches=" << scorer.batches() << " forwards=" << scorer.forwards()
              << " users=" << store.user_count() << '\n';
  }

  if (a.stdio || a.listen >= 0) {
    if (a.catalog.empty()) throw std::invalid_argument("--catalog is required for --stdio / --listen");
    ProtocolHandler handler(scorer, store, encoder, read_catalog(a.catalog), {}, RankOptions{a.bid});
    if (a.stdio) {
      serve_stream(std::cin, std::cout, handler);
    } else {
      serve_tcp(static_cast<std::uint16_t>(a.listen), handler, 0,
                [](std::uint16_t port) { std::cerr << "listening on 127.0.0.1:" << port << '\n'; });
    }
  }

  if (!a.snapshot_out.empty()) {
    auto os = open_out(a.snapshot_out);
    store.snapshot(os);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DSTN click-through-rate prediction engine"};
  app.require_subcommand(1);
  std::string simd_choice;
  app.add_option("--simd", simd_choice, "Kernel set: scalar or avx2 (default: detected)");

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic click log");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::size_t gen_candidates = 4;
  gen->add_option("--config", gen_config, "Generator JSON config");
  gen->add_option("--seed", gen_seed, "Override the config seed");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--serving-candidates", gen_candidates, "Extra candidates per serving request");

  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_variant, tr_config, tr_train, tr_val, tr_out, tr_schema, tr_ablate, tr_warm;
  tr->add_option("--variant", tr_variant, "lr, dnn, dstn-p, dstn-s or dstn-i");
  tr->add_option("--config", tr_config, "Training JSON config");
  tr->add_option("--train", tr_train, "Training log")->required();
  tr->add_option("--val", tr_val, "Validation log");
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--schema", tr_schema, "Schema TSV (default: schema.tsv beside the training log)");
  tr->add_option("--ablate", tr_ablate, "Use only this auxiliary group: ctx, clk or unclk");
  tr->add_option("--warm-start", tr_warm, "Initialize from this checkpoint");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_test, ev_dump, ev_ablate, ev_report;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--test", ev_test, "Test log")->required();
  ev->add_option("--dump-attention", ev_dump, "Write per-ad attention weights here");
  ev->add_option("--ablate", ev_ablate, "Keep only this auxiliary group: ctx, clk or unclk");
  ev->add_option("--report", ev_report, "Key-value report path (default: <ckpt>.eval.txt)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  std::string gc_variant = "all";
  double gc_tol = 1e-4;
  gc->add_option("--variant", gc_variant, "Variant or 'all'");
  gc->add_option("--tol", gc_tol, "Relative error tolerance");

  auto* sv = app.add_subcommand("serve-sim", "Replay a serving log or answer protocol requests");
  ServeArgs sa;
  sv->add_option("--ckpt", sa.ckpt, "Checkpoint path")->required();
  sv->add_option("--events", sa.events, "Serving event log");
  sv->add_option("--slots", sa.slots, "Ad slots per page");
  sv->add_option("--lag-seconds", sa.lag, "Event visibility lag");
  sv->add_option("--out", sa.out, "Results TSV (default: stdout)");
  sv->add_flag("--bid-weighted", sa.bid, "Rank by pCTR x bid");
  sv->add_option("--snapshot-in", sa.snapshot_in, "Restore the session store first");
  sv->add_option("--snapshot-out", sa.snapshot_out, "Write the session store at the end");
  sv->add_option("--catalog", sa.catalog, "Ad catalog (one field list per line) for protocol mode");
  sv->add_flag("--stdio", sa.stdio, "Answer protocol requests on stdin/stdout");
  sv->add_option("--listen", sa.listen, "Answer protocol requests on 127.0.0.1:<port>");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!simd_choice.empty()) simd::select(simd::parse_isa(simd_choice));
    if (*gen) return cmd_gen_data(gen_config, gen_seed, gen_out, gen_candidates);
    if (*tr) return cmd_train(tr_variant, tr_config, tr_train, tr_val, tr_out, tr_schema, tr_ablate, tr_warm);
    if (*ev) return cmd_eval(ev_ckpt, ev_test, ev_dump, ev_ablate, ev_report);
    if (*gc) return cmd_gradcheck(gc_variant, gc_tol);
    if (*sv) return cmd_serve_sim(sa);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

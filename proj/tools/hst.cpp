// hst: train, evaluate, inspect and profile hierarchical side-tuning models.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "hst/hst.hpp"

namespace fs = std::filesystem;
using namespace hst;

namespace {

struct Common {
  std::string config;
  std::string ckpt;
  std::string dataset;
  std::string out;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve_config(const Common& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) {
    rc.model.seed = *o.seed;
    rc.train.seed = *o.seed;
    rc.data.seed = *o.seed;
  }
  return rc;
}

std::string optim_path(const std::string& ckpt) { return fs::path(ckpt).replace_extension(".optim").string(); }

Checkpoint load_matching(const std::string& path, const RunConfig& rc) {
  auto ck = read_checkpoint(path);
  const auto want = config_hash(rc);
  if (ck.config_hash != want) {
    std::ostringstream os;
    os << "checkpoint '" << path << "' was written for configuration hash " << std::hex << ck.config_hash
       << ", the requested architecture hashes to " << want;
    throw AuditError(os.str());
  }
  return ck;
}

/// Train/test splits from --dataset (used whole as the evaluation set) or the
/// configured synthetic generator.
std::pair<data::Dataset, data::Dataset> load_splits(const RunConfig& rc, const std::string& dataset) {
  if (!dataset.empty()) {
    auto ds = data::read_dataset(dataset);
    if (ds.height != rc.model.backbone.image_size || ds.width != rc.model.backbone.image_size || ds.channels != 3)
      throw ConfigError("dataset '" + dataset + "' holds " + std::to_string(ds.height) + "x" +
                        std::to_string(ds.width) + " images, the model expects " +
                        std::to_string(rc.model.backbone.image_size));
    return {ds, ds};
  }
  auto all = data::generate(rc.synthetic_spec(), rc.model.backbone.patch_size);
  return data::split_per_class(all, rc.data.train_per_class);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void print_report(std::ostream& os, const ParamReport& r) {
  for (const auto& [comp, n] : r.trainable_by_component) os << "trainable." << comp << "=" << n << "\n";
  os << "total_trainable=" << r.total_trainable << "\n"
     << "total_frozen=" << r.total_frozen << "\n"
     << "total=" << r.total() << "\n"
     << "trainable_fraction=" << fmt(r.trainable_fraction()) << "\n"
     << "distinct_projections=" << r.distinct_projections << "\n";
}

void save(const std::string& path, const HSTModel<float>& m, const Trainer<float>& t, std::uint64_t hash) {
  write_checkpoint(path, snapshot(m.params(), hash, t.steps()));
  write_checkpoint(optim_path(path), t.optimizer().state(hash));
}

int cmd_train(const Common& o) {
  if (o.out.empty()) throw ConfigError("train needs --out");
  auto rc = resolve_config(o);
  const auto hash = config_hash(rc);
  fs::create_directories(o.out);
  {
    std::ofstream cfg(fs::path(o.out) / "config.json");
    cfg << to_json(rc).dump(2) << "\n";
  }
  auto [train, test] = load_splits(rc, o.dataset);
  if (rc.train.batch_size > train.count)
    throw ConfigError("train.batch_size (" + std::to_string(rc.train.batch_size) + ") exceeds the " +
                      std::to_string(train.count) + " training samples");

  HSTModel<float> model(rc.model);
  const std::size_t per_epoch = (train.count + rc.train.batch_size - 1) / rc.train.batch_size;
  const std::uint64_t total = per_epoch * rc.train.epochs;
  Trainer<float> trainer(model, rc.train, total);
  if (!o.ckpt.empty()) {
    auto ck = load_matching(o.ckpt, rc);
    restore(model.params(), ck);
    auto st = read_checkpoint(optim_path(o.ckpt));
    if (st.config_hash != hash || st.step != ck.step)
      throw AuditError("optimizer state '" + optim_path(o.ckpt) + "' does not belong to '" + o.ckpt + "'");
    trainer.optimizer().load_state(st);
    std::cout << "resumed from step " << ck.step << "\n";
  }

  std::ofstream metrics(fs::path(o.out) / "metrics.log", o.ckpt.empty() ? std::ios::trunc : std::ios::app);
  metrics << std::setprecision(9);
  train_loop<float>(trainer, train, [&](const StepResult& r, std::uint64_t step) {
    metrics << trainer.metrics(r).str() << std::endl;
    if (rc.train.checkpoint_every && step % rc.train.checkpoint_every == 0 && step < total)
      save((fs::path(o.out) / ("ckpt_step" + std::to_string(step) + ".hstc")).string(), model, trainer, hash);
    if (step % per_epoch == 0) std::cout << "epoch " << step / per_epoch << " loss=" << fmt(r.loss) << "\n";
    return true;
  });
  const auto final_path = (fs::path(o.out) / "final.hstc").string();
  save(final_path, model, trainer, hash);

  const auto tr = evaluate(model, train), te = evaluate(model, test);
  metrics << "eval split=train step=" << trainer.steps() << " loss=" << fmt(tr.loss) << " accuracy=" << fmt(tr.accuracy)
          << "\n"
          << "eval split=test step=" << trainer.steps() << " loss=" << fmt(te.loss) << " accuracy=" << fmt(te.accuracy)
          << std::endl;
  std::ofstream rep(fs::path(o.out) / "param_report.txt");
  print_report(rep, model.param_report());
  print_report(std::cout, model.param_report());
  std::cout << "train_accuracy=" << fmt(tr.accuracy) << "\n"
            << "test_accuracy=" << fmt(te.accuracy) << "\n"
            << "checkpoint=" << final_path << "\n";
  return 0;
}

int cmd_eval(const Common& o, const std::string& split) {
  if (o.ckpt.empty()) throw ConfigError("eval needs --ckpt");
  auto rc = resolve_config(o);
  auto ck = load_matching(o.ckpt, rc);
  HSTModel<float> model(rc.model);
  restore(model.params(), ck);
  auto [train, test] = load_splits(rc, o.dataset);
  if (split != "train" && split != "test") throw ConfigError("--split must be train or test");
  const auto r = evaluate(model, split == "train" ? train : test);
  std::cout << "split=" << split << " step=" << ck.step << " count=" << r.count << " loss=" << fmt(r.loss)
            << " accuracy=" << fmt(r.accuracy) << "\n";
  return 0;
}

int cmd_inspect(const Common& o) {
  if (o.ckpt.empty()) throw ConfigError("inspect needs --ckpt");
  auto rc = resolve_config(o);
  auto ck = load_matching(o.ckpt, rc);
  HSTModel<float> model(rc.model);
  restore(model.params(), ck);
  std::cout << "config_hash=" << std::hex << ck.config_hash << std::dec << "\nstep=" << ck.step
            << "\nentries=" << ck.entries.size() << "\n";
  for (const auto& [name, rec] : ck.entries)
    std::cout << (model.params().at(name).trainable ? "trainable " : "frozen    ") << name << " "
              << (rec.dtype == DType::f32 ? "f32" : "f64") << " " << shape_str(rec.shape) << "\n";
  print_report(std::cout, model.param_report());
  return 0;
}

Tensor<float> probe_images(const RunConfig& rc, const std::string& dataset, std::size_t count) {
  auto [train, test] = load_splits(rc, dataset);
  (void)train;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(count, test.count); ++i) idx.push_back(i * test.count / std::min(count, test.count));
  return data::load_batch<float>(test, idx).images;
}

int cmd_diag(const Common& o, const std::string& which, const std::string& against, std::size_t subset) {
  auto rc = resolve_config(o);
  HSTModel<float> model(rc.model);
  if (!o.ckpt.empty()) restore(model.params(), load_matching(o.ckpt, rc));
  if (which == "cosine") {
    auto cs = diag::cosine_similarity_per_layer(model, probe_images(rc, o.dataset, 32));
    std::cout << "layer,cosine\n" << std::setprecision(9);
    for (std::size_t i = 0; i < cs.size(); ++i) std::cout << i << "," << cs[i] << "\n";
  } else if (which == "compare") {
    if (against.empty()) throw ConfigError("diag compare needs --against <checkpoint trained with LN tuning>");
    HSTModel<float> after(rc.model);
    restore(after.params(), load_matching(against, rc));
    diag::write_csv(std::cout, diag::compare_ln_tuning(model, after, probe_images(rc, o.dataset, 32)));
  } else if (which == "gradcheck") {
    HSTModel<double> m64(rc.model);
    if (!o.ckpt.empty()) restore(m64.params(), load_matching(o.ckpt, rc));
    auto [train, test] = load_splits(rc, o.dataset);
    (void)test;
    std::vector<std::size_t> idx{0, train.count / 2};
    auto b = data::load_batch<double>(train, idx);
    auto rep = grad_check(m64, b.images, b.labels, subset, rc.model.seed);
    std::cout << "name,index,analytic,numeric,rel_error\n" << std::setprecision(9);
    for (const auto& e : rep.entries) {
      std::cout << e.name << "," << e.index << ",";
      if (e.rel_error)
        std::cout << *e.analytic << "," << *e.numeric << "," << *e.rel_error << "\n";
      else
        std::cout << "no gradient,,\n";
    }
    std::cout << "checked=" << rep.checked << " max_rel_error=" << rep.max_rel_error << "\n";
    return rep.max_rel_error < 1e-3 ? 0 : 1;
  } else if (which == "audit") {
    if (o.ckpt.empty() || against.empty()) throw ConfigError("diag audit needs --ckpt <before> and --against <after>");
    auto a = audit_freeze(model, load_matching(o.ckpt, rc), load_matching(against, rc));
    std::cout << "frozen_violations=" << a.violations.size() << "\n";
    for (const auto& n : a.violations) std::cout << "violation " << n << "\n";
    for (const auto& n : a.changed_trainable) std::cout << "changed " << n << "\n";
    return a.ok() ? 0 : 1;
  } else {
    throw ConfigError("unknown diagnostic '" + which + "' (expected cosine, compare, gradcheck or audit)");
  }
  return 0;
}

int cmd_generate(const Common& o, const std::string& split) {
  if (o.out.empty()) throw ConfigError("generate-data needs --out");
  auto rc = resolve_config(o);
  auto all = data::generate(rc.synthetic_spec(), rc.model.backbone.patch_size);
  data::Dataset ds = all;
  if (split != "all") {
    auto [train, test] = data::split_per_class(all, rc.data.train_per_class);
    if (split == "train")
      ds = std::move(train);
    else if (split == "test")
      ds = std::move(test);
    else
      throw ConfigError("--split must be all, train or test");
  }
  data::write_dataset(o.out, ds);
  std::cout << "wrote " << ds.count << " samples to " << o.out << "\n";
  return 0;
}

int cmd_profile(const Common& o, const std::string& what, std::size_t trials, std::size_t batch) {
  auto rc = resolve_config(o);
  if (what == "model") {
    HSTModel<float> model(rc.model);
    if (!o.ckpt.empty()) restore(model.params(), load_matching(o.ckpt, rc));
    auto x = probe_images(rc, o.dataset, batch);
    const auto mf = diag::module_flops(model, x);
    const auto p = diag::profile_model(model, x, trials);
    std::cout << "batch=" << x.dim(0) << "\nflops.backbone=" << mf.backbone << "\nflops.bridge=" << mf.bridge
              << "\nflops.hsn=" << mf.hsn << "\nflops.head=" << mf.head << "\nflops.total=" << p.flops
              << "\nwall_seconds=" << fmt(p.wall_seconds) << "\npeak_bytes=" << p.peak_bytes << "\ntrials=" << p.trials
              << "\n";
  } else if (what == "attention") {
    std::vector<std::size_t> lengths;
    for (std::size_t l = 256; l <= 65536; l *= 2) lengths.push_back(l);
    const std::size_t d = rc.model.hsn.stage_dims[0];
    const std::size_t m = rc.model.backbone.num_meta_tokens + 1;
    auto rep = diag::attention_complexity_profile(lengths, d, m, trials, 2e10, rc.model.seed);
    diag::write_csv(std::cout, rep);
    std::cout << "cross_slope=" << fmt(rep.cross_slope) << "\nnaive_slope=" << fmt(rep.naive_slope) << "\n";
  } else {
    throw ConfigError("unknown profile target '" + what + "' (expected model or attention)");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Hierarchical side-tuning on a frozen vision transformer"};
  app.require_subcommand(1);
  Common o;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON configuration (defaults when omitted)");
    sub->add_option("--seed", seed, "Override model, data and shuffle seeds");
    sub->add_option("--dataset", o.dataset, "HSTD dataset file instead of the synthetic generator");
  };

  auto* train = app.add_subcommand("train", "Train and write metrics, checkpoints and the parameter report");
  add_common(train);
  train->add_option("--out", o.out, "Output directory")->required();
  train->add_option("--ckpt", o.ckpt, "Resume from this checkpoint (its .optim sibling holds the optimizer)");

  std::string split = "test";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  eval->add_option("--split", split, "train or test");

  auto* inspect = app.add_subcommand("inspect", "List checkpoint tensors and the parameter report");
  add_common(inspect);
  inspect->add_option("--ckpt", o.ckpt, "Checkpoint")->required();

  std::string which, against;
  std::size_t subset = 200;
  auto* dg = app.add_subcommand("diag", "Diagnostics: cosine, compare, gradcheck, audit");
  add_common(dg);
  dg->add_option("which", which, "cosine | compare | gradcheck | audit")->required();
  dg->add_option("--ckpt", o.ckpt, "Checkpoint (before, for compare and audit)");
  dg->add_option("--against", against, "Second checkpoint (after)");
  dg->add_option("--subset", subset, "Number of sampled scalars for gradcheck");

  std::string gen_split = "all";
  auto* gen = app.add_subcommand("generate-data", "Write the synthetic dataset as an HSTD file");
  add_common(gen);
  gen->add_option("--out", o.out, "Output file")->required();
  gen->add_option("--split", gen_split, "all, train or test");

  std::string what = "model";
  std::size_t trials = 100, batch = 8;
  auto* prof = app.add_subcommand("profile", "FLOPs, wall time and peak memory");
  add_common(prof);
  prof->add_option("what", what, "model | attention");
  prof->add_option("--ckpt", o.ckpt, "Checkpoint");
  prof->add_option("--trials", trials, "Timed repetitions")->check(CLI::PositiveNumber);
  prof->add_option("--batch", batch, "Images per forward for the model profile")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  for (auto* sub : {train, eval, inspect, dg, gen, prof})
    if (sub->count("--seed")) o.seed = seed;

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o, split);
    if (*inspect) return cmd_inspect(o);
    if (*dg) return cmd_diag(o, which, against, subset);
    if (*gen) return cmd_generate(o, gen_split);
    if (*prof) return cmd_profile(o, what, trials, batch);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "histodistill/coreset.hpp"
#include "histodistill/dataset.hpp"
#include "histodistill/distill.hpp"
#include "histodistill/eval.hpp"
#include "histodistill/io.hpp"
#include "histodistill/models.hpp"
#include "histodistill/pipeline.hpp"
#include "histodistill/stain.hpp"

namespace fs = std::filesystem;
using namespace histodistill;

namespace {

// Resolves the template profile for a run: explicit file, or fitted from the
// training data (template selection + stain estimation).
stain::StainProfile resolve_profile(const pipeline::RunConfig& cfg,
                                    const data::PatchDataset& train) {
  if (!cfg.stain_profile.empty()) return stain::load_profile(cfg.stain_profile);
  const size_t idx = stain::select_template(train);
  return stain::estimate_stain_profile(train, idx, stain::StainConfig{});
}

aug::AugmentationSpec resolve_augment(const pipeline::RunConfig& cfg,
                                      const stain::StainProfile* profile) {
  aug::AugmentationSpec spec = cfg.distill.augment;
  spec.ops.clear();
  for (const auto& name : cfg.aug_ops) spec.ops.push_back(aug::op_from_name(name));
  for (aug::Op op : spec.ops) {
    if (op == aug::Op::stain_norm) {
      if (!profile) throw std::runtime_error("augment: stain_norm requires a stain profile");
      spec.template_profile = *profile;
      spec.stain_cfg = profile->config;
    }
  }
  spec.validate();
  return spec;
}

nn::ArchitectureSpec make_arch(std::string name, int width, const data::PatchDataset& ds) {
  nn::ArchitectureSpec a;
  a.name = std::move(name);
  a.width = width;
  a.num_classes = ds.num_classes();
  a.input_shape = {3, ds.height(), ds.width()};
  a.validate();
  return a;
}

nn::ModelPool build_pool(const pipeline::RunConfig& cfg, const data::PatchDataset& train) {
  nn::ArchitectureSpec arch = make_arch(cfg.distill_arch.name, cfg.distill_arch.width, train);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  return nn::pretrain_pool(train, arch, cfg.pool_size, cfg.pool_epochs, rng);
}

eval::TrainSource coreset_source(const data::PatchDataset& train,
                                 const coreset::CoresetResult& sel, int per_class) {
  eval::TrainSource src;
  src.data = coreset::to_train_data(train, sel);
  src.descriptor =
      std::string("coreset(") + coreset::method_name(sel.method) + "," + std::to_string(per_class) + ")";
  src.storage_bytes = eval::png_payload_bytes(src.data);
  return src;
}

int cmd_gen_toy(const pipeline::ToyGenSpec& spec, const fs::path& out) {
  pipeline::ToyCorpus corpus = pipeline::generate_toy_dataset(spec);
  fs::create_directories(out);
  data::save_manifest(corpus.train, out / "train");
  data::save_manifest(corpus.test, out / "test");
  stain::save_profile(corpus.profile, out / "profile.txt");
  std::printf("gen-toy: %zu train / %zu test patches, %d classes, template %s\n",
              corpus.train.size(), corpus.test.size(), spec.num_classes,
              corpus.profile.template_ref.c_str());
  return 0;
}

int cmd_distill(const fs::path& config_path) {
  const pipeline::RunConfig cfg = pipeline::load_run_config(config_path);
  const uint64_t hash = pipeline::run_config_hash(cfg);
  const data::PatchDataset train = data::load_manifest(cfg.train_data);

  stain::StainProfile profile = resolve_profile(cfg, train);
  pipeline::RunConfig run = cfg;
  run.distill.augment = resolve_augment(cfg, &profile);

  std::printf("distill: pretraining pool (%d x %d epochs, %s)\n", cfg.pool_size, cfg.pool_epochs,
              cfg.distill_arch.name.c_str());
  nn::ModelPool pool = build_pool(cfg, train);

  std::printf("distill: K=%d U=%d m=%d lr_syn=%g\n", run.distill.outer_steps,
              run.distill.inner_steps, run.distill.per_class, run.distill.lr_syn);
  auto [synthetic, log] = distill::run_distillation(train, pool, run.distill);
  synthetic.seed = run.distill.seed;

  fs::create_directories(cfg.output_dir);
  distill::save_synthetic(synthetic, cfg.output_dir / "synthetic", hash);
  log.save(cfg.output_dir / "runlog.csv");
  stain::save_profile(profile, cfg.output_dir / "profile.txt");
  pipeline::write_contact_sheet(synthetic, cfg.output_dir / "contact_sheet.png");
  io::write_text_file(cfg.output_dir / "config.json",
                      pipeline::run_config_canonical_json(cfg) + "\n");

  const auto outer_means = log.per_outer_mean();
  if (!outer_means.empty())
    std::printf("distill: outer-mean loss first=%.4f last=%.4f\n", outer_means.front(),
                outer_means.back());
  std::printf("distill: wrote %s\n", (cfg.output_dir / "synthetic").string().c_str());
  return 0;
}

int cmd_coreset(const fs::path& data_dir, const std::string& method, int m, const fs::path& out,
                uint64_t seed, int epochs) {
  const data::PatchDataset train = data::load_manifest(data_dir);
  Rng rng(seed);
  coreset::CoresetResult result;
  const coreset::Method mm = coreset::method_from_name(method);
  if (mm == coreset::Method::random) {
    result = coreset::random_select(train, m, rng);
  } else if (mm == coreset::Method::herding) {
    nn::ArchitectureSpec arch = make_arch("convnet3", 0, train);
    nn::ModelSnapshot feature_model = nn::build_model(arch, seed);
    Rng trng(seed ^ 0xda3e39cb94b95bdbULL);
    nn::train_snapshot_with_retry(feature_model, nn::train_data_from_dataset(train),
                                  std::max(1, epochs), {}, trng);
    result = coreset::herding_select(train, m, feature_model);
  } else {
    nn::ArchitectureSpec arch = make_arch("convnet3", 0, train);
    result = coreset::forgetting_select(train, m, arch, std::max(2, epochs), rng);
  }
  coreset::save_coreset(result, out);
  std::printf("coreset: %s m=%d -> %s\n", method.c_str(), m, out.string().c_str());
  return 0;
}

int cmd_eval(const fs::path& config_path, const std::string& source, const fs::path& synthetic_dir,
             const fs::path& coreset_file, std::string arch_name, const fs::path& out) {
  const pipeline::RunConfig cfg = pipeline::load_run_config(config_path);
  const data::PatchDataset train = data::load_manifest(cfg.train_data);
  const data::PatchDataset test = data::load_manifest(cfg.test_data);

  stain::StainProfile profile = resolve_profile(cfg, train);
  aug::AugmentationSpec augment = resolve_augment(cfg, &profile);

  eval::TrainSource src;
  if (source == "full") {
    src = eval::source_from_dataset(train, "full");
  } else if (source == "synthetic") {
    src = eval::source_from_synthetic(distill::load_synthetic(synthetic_dir));
  } else if (source == "coreset") {
    coreset::CoresetResult sel = coreset::load_coreset(coreset_file);
    const int per_class = sel.selected.empty() ? 0 : static_cast<int>(sel.selected[0].size());
    src = coreset_source(train, sel, per_class);
  } else {
    std::fprintf(stderr, "eval: unknown source '%s'\n", source.c_str());
    return 2;
  }
  if (arch_name.empty())
    arch_name = cfg.eval_archs.empty() ? std::string("convnet3") : cfg.eval_archs.front();
  nn::ArchitectureSpec arch = make_arch(arch_name, 0, train);

  eval::EvalReport report = eval::repeat_eval(src, arch, test, cfg.eval_epochs, cfg.eval_seeds,
                                              augment.enabled() ? &augment : nullptr);
  report.config_hash = pipeline::run_config_hash(cfg);
  if (!out.empty()) eval::append_report_jsonl(report, out);
  std::fputs(eval::format_report_table({report}).c_str(), stdout);
  return 0;
}

int cmd_cross_arch(const fs::path& config_path, const fs::path& synthetic_dir,
                   const fs::path& out) {
  const pipeline::RunConfig cfg = pipeline::load_run_config(config_path);
  const data::PatchDataset train = data::load_manifest(cfg.train_data);
  const data::PatchDataset test = data::load_manifest(cfg.test_data);
  stain::StainProfile profile = resolve_profile(cfg, train);
  aug::AugmentationSpec augment = resolve_augment(cfg, &profile);

  std::vector<nn::ArchitectureSpec> archs;
  for (const auto& name : cfg.eval_archs) archs.push_back(make_arch(name, 0, train));
  if (archs.empty()) archs.push_back(make_arch("convnet3", 0, train));

  distill::SyntheticSet synthetic = distill::load_synthetic(synthetic_dir);
  auto reports = eval::cross_arch_eval(synthetic, archs, test, cfg.eval_epochs, cfg.eval_seeds,
                                       augment.enabled() ? &augment : nullptr);
  for (auto& r : reports) {
    r.config_hash = pipeline::run_config_hash(cfg);
    if (!out.empty()) eval::append_report_jsonl(r, out);
  }
  std::fputs(eval::format_report_table(reports).c_str(), stdout);
  return 0;
}

int cmd_mil_eval(const fs::path& config_path, const std::string& bags_mode,
                 const std::string& aggregator, int mil_epochs, const fs::path& out) {
  const pipeline::RunConfig cfg = pipeline::load_run_config(config_path);
  const data::PatchDataset train = data::load_manifest(cfg.train_data);
  const data::PatchDataset test = data::load_manifest(cfg.test_data);
  const std::vector<eval::SlideBag> test_bags = eval::bags_from_dataset(test);

  std::vector<eval::SlideBag> train_bags;
  uint64_t storage = 0;
  if (bags_mode == "full") {
    train_bags = eval::bags_from_dataset(train);
    storage = eval::png_payload_bytes(nn::train_data_from_dataset(train));
  } else if (bags_mode == "synthetic") {
    stain::StainProfile profile = resolve_profile(cfg, train);
    pipeline::RunConfig run = cfg;
    run.distill.augment = resolve_augment(cfg, &profile);
    nn::ModelPool pool = build_pool(cfg, train);
    for (const auto& slide : train.slide_ids()) {
      data::PatchDataset sub = train.subset_by_slide(slide);
      distill::DistillConfig dcfg = run.distill;
      auto [synthetic, log] = distill::run_distillation(sub, pool, dcfg);
      nn::TrainData td = synthetic.to_train_data();
      storage += eval::png_payload_bytes(td);
      eval::SlideBag bag;
      bag.slide_id = slide;
      bag.bag_label = td.labels.front();
      const int64_t n = static_cast<int64_t>(td.images.size());
      std::vector<double> buf;
      buf.reserve(static_cast<size_t>(n) * td.images[0].size());
      for (const auto& img : td.images) buf.insert(buf.end(), img.begin(), img.end());
      bag.instances.pixels =
          ad::Tensor::from_data({n, 3, td.height, td.width}, std::move(buf));
      bag.instances.labels = td.labels;
      train_bags.push_back(std::move(bag));
    }
  } else {
    std::fprintf(stderr, "mil-eval: unknown bags mode '%s'\n", bags_mode.c_str());
    return 2;
  }

  const eval::Aggregator agg =
      aggregator == "mean" ? eval::Aggregator::mean : eval::Aggregator::attention;
  eval::EvalReport report = eval::mil_eval(train_bags, test_bags, agg, mil_epochs, cfg.eval_seeds);
  report.storage_bytes = storage;
  report.train_source = bags_mode + "-bags";
  report.config_hash = pipeline::run_config_hash(cfg);
  if (!out.empty()) eval::append_report_jsonl(report, out);
  std::fputs(eval::format_report_table({report}).c_str(), stdout);
  return 0;
}

int cmd_transfer(const fs::path& pretrain_dir, const std::string& source,
                 const fs::path& finetune_dir, const fs::path& synthetic_dir,
                 const fs::path& test_dir, int epochs, const std::string& arch_name,
                 uint64_t seed, const fs::path& out) {
  const data::PatchDataset pretrain_data = data::load_manifest(pretrain_dir);
  const data::PatchDataset test = data::load_manifest(test_dir);

  nn::ArchitectureSpec arch = make_arch(arch_name, 0, pretrain_data);
  nn::ModelSnapshot pretrained =
      eval::train_classifier(nn::train_data_from_dataset(pretrain_data), arch, 10, seed);

  eval::TrainSource src;
  if (source == "full") {
    src = eval::source_from_dataset(data::load_manifest(finetune_dir), "full");
  } else if (source == "synthetic") {
    src = eval::source_from_synthetic(distill::load_synthetic(synthetic_dir));
  } else {
    std::fprintf(stderr, "transfer: unknown source '%s'\n", source.c_str());
    return 2;
  }
  eval::EvalReport report =
      eval::transfer_eval(pretrained, src, test, epochs, {seed + 1, seed + 2, seed + 3});
  if (!out.empty()) eval::append_report_jsonl(report, out);
  std::fputs(eval::format_report_table({report}).c_str(), stdout);
  return 0;
}

int cmd_sweep(const fs::path& config_path, const std::string& outer_list,
              const std::string& inner_list, const std::string& lr_list, const fs::path& out) {
  const pipeline::RunConfig cfg = pipeline::load_run_config(config_path);
  const data::PatchDataset train = data::load_manifest(cfg.train_data);
  const data::PatchDataset test = data::load_manifest(cfg.test_data);
  stain::StainProfile profile = resolve_profile(cfg, train);
  aug::AugmentationSpec augment = resolve_augment(cfg, &profile);
  nn::ModelPool pool = build_pool(cfg, train);

  auto parse_list = [](const std::string& s) {
    std::vector<double> out_vals;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out_vals.push_back(std::stod(tok));
    return out_vals;
  };
  const auto outers = outer_list.empty() ? std::vector<double>{double(cfg.distill.outer_steps)}
                                         : parse_list(outer_list);
  const auto inners = inner_list.empty() ? std::vector<double>{double(cfg.distill.inner_steps)}
                                         : parse_list(inner_list);
  const auto lrs = lr_list.empty() ? std::vector<double>{cfg.distill.lr_syn} : parse_list(lr_list);

  std::ostringstream table;
  table << "outer,inner,lr_syn,accuracy_mean,accuracy_std\n";
  nn::ArchitectureSpec eval_arch = make_arch("convnet3", 0, train);
  for (double K : outers) {
    for (double U : inners) {
      for (double lr : lrs) {
        distill::DistillConfig dcfg = cfg.distill;
        dcfg.augment = augment;
        dcfg.outer_steps = static_cast<int>(K);
        dcfg.inner_steps = static_cast<int>(U);
        dcfg.lr_syn = lr;
        auto [synthetic, log] = distill::run_distillation(train, pool, dcfg);
        eval::TrainSource src = eval::source_from_synthetic(synthetic);
        eval::EvalReport r = eval::repeat_eval(src, eval_arch, test, cfg.eval_epochs,
                                               cfg.eval_seeds, augment.enabled() ? &augment : nullptr);
        char line[160];
        std::snprintf(line, sizeof(line), "%d,%d,%g,%.3f,%.3f\n", dcfg.outer_steps,
                      dcfg.inner_steps, lr, r.accuracy_mean, r.accuracy_std);
        table << line;
        std::fputs(line, stdout);
      }
    }
  }
  if (!out.empty()) io::write_text_file(out, table.str());
  return 0;
}

int cmd_stain_template(const fs::path& data_dir, const fs::path& out) {
  const data::PatchDataset ds = data::load_manifest(data_dir);
  const size_t idx = stain::select_template(ds);
  const stain::StainProfile profile = stain::estimate_stain_profile(ds, idx, stain::StainConfig{});
  stain::save_profile(profile, out);
  std::printf("stain-template: record %zu (%s) -> %s\n", idx, ds.record(idx).image_ref.c_str(),
              out.string().c_str());
  return 0;
}

int cmd_extract_patches(const fs::path& slide_path, const fs::path& out, int patch_size,
                        int stride, double tissue_fraction) {
  const io::Image slide = io::read_png(slide_path);
  bool degenerate = false;
  auto patches = pipeline::extract_patches(slide, patch_size, stride, tissue_fraction, &degenerate);
  if (degenerate) std::fprintf(stderr, "extract-patches: degenerate threshold, all-tissue mask\n");

  std::vector<data::PatchRecord> recs;
  std::vector<std::vector<float>> pix;
  const std::string slide_id = slide_path.stem().string();
  for (const auto& p : patches) {
    data::PatchRecord r;
    r.label = 0;
    r.slide_id = slide_id;
    r.image_ref = "r" + std::to_string(p.row) + "_c" + std::to_string(p.col);
    recs.push_back(std::move(r));
    pix.push_back(p.chw);
  }
  if (recs.empty()) {
    std::fprintf(stderr, "extract-patches: no patch passed the tissue filter\n");
    return 1;
  }
  data::PatchDataset ds = data::PatchDataset::build(
      1, {patch_size, patch_size, 3}, std::move(recs), std::move(pix), /*strict_classes=*/false);
  data::save_manifest(ds, out);
  std::printf("extract-patches: kept %zu patches -> %s\n", ds.size(), out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  pipeline::apply_deterministic_mode();
  CLI::App app{"histodistill: synthetic-patch distillation toolkit for stained-image datasets"};
  app.require_subcommand(1);

  // gen-toy
  auto* gen = app.add_subcommand("gen-toy", "generate a toy stained-patch corpus");
  pipeline::ToyGenSpec spec;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--classes", spec.num_classes);
  gen->add_option("--per-class", spec.patches_per_class);
  gen->add_option("--size", spec.image_size);
  gen->add_option("--noise", spec.noise_level);
  gen->add_option("--jitter", spec.stain_jitter_degrees);
  gen->add_option("--slides", spec.slides_per_class);
  gen->add_option("--patches-per-slide", spec.patches_per_slide);
  gen->add_option("--seed", spec.seed);

  // extract-patches
  auto* ext = app.add_subcommand("extract-patches", "tile a slide image into tissue patches");
  std::string ext_slide, ext_out;
  int ext_patch = 256, ext_stride = 256;
  double ext_frac = 0.5;
  ext->add_option("--slide", ext_slide)->required();
  ext->add_option("--out", ext_out)->required();
  ext->add_option("--patch-size", ext_patch);
  ext->add_option("--stride", ext_stride);
  ext->add_option("--tissue-fraction", ext_frac);

  // stain-template
  auto* st = app.add_subcommand("stain-template", "select template and fit its stain profile");
  std::string st_data, st_out;
  st->add_option("--data", st_data)->required();
  st->add_option("--out", st_out)->required();

  // distill
  auto* di = app.add_subcommand("distill", "learn a synthetic set from a run config");
  std::string di_config;
  di->add_option("--config", di_config)->required();

  // coreset
  auto* co = app.add_subcommand("coreset", "select a coreset baseline");
  std::string co_data, co_method = "random", co_out;
  int co_m = 10, co_epochs = 2;
  uint64_t co_seed = 1;
  co->add_option("--data", co_data)->required();
  co->add_option("--method", co_method);
  co->add_option("--m", co_m);
  co->add_option("--out", co_out)->required();
  co->add_option("--seed", co_seed);
  co->add_option("--epochs", co_epochs);

  // eval
  auto* ev = app.add_subcommand("eval", "train on a source, test on real");
  std::string ev_config, ev_source = "full", ev_syn, ev_coreset, ev_arch, ev_out;
  ev->add_option("--config", ev_config)->required();
  ev->add_option("--source", ev_source);
  ev->add_option("--synthetic", ev_syn);
  ev->add_option("--coreset", ev_coreset);
  ev->add_option("--arch", ev_arch);
  ev->add_option("--out", ev_out);

  // cross-arch
  auto* ca = app.add_subcommand("cross-arch", "evaluate a synthetic set across architectures");
  std::string ca_config, ca_syn, ca_out;
  ca->add_option("--config", ca_config)->required();
  ca->add_option("--synthetic", ca_syn)->required();
  ca->add_option("--out", ca_out);

  // mil-eval
  auto* mi = app.add_subcommand("mil-eval", "slide-level MIL on full or synthetic bags");
  std::string mi_config, mi_bags = "full", mi_agg = "attention", mi_out;
  int mi_epochs = 30;
  mi->add_option("--config", mi_config)->required();
  mi->add_option("--bags", mi_bags);
  mi->add_option("--aggregator", mi_agg);
  mi->add_option("--mil-epochs", mi_epochs);
  mi->add_option("--out", mi_out);

  // transfer
  auto* tr = app.add_subcommand("transfer", "cross-centre fine-tuning");
  std::string tr_pre, tr_source = "full", tr_fine, tr_syn, tr_test, tr_arch = "convnet3", tr_out;
  int tr_epochs = 5;
  uint64_t tr_seed = 1;
  tr->add_option("--pretrain-data", tr_pre)->required();
  tr->add_option("--source", tr_source);
  tr->add_option("--finetune-data", tr_fine);
  tr->add_option("--synthetic", tr_syn);
  tr->add_option("--test-data", tr_test)->required();
  tr->add_option("--epochs", tr_epochs);
  tr->add_option("--arch", tr_arch);
  tr->add_option("--seed", tr_seed);
  tr->add_option("--out", tr_out);

  // sweep
  auto* sw = app.add_subcommand("sweep", "sensitivity grid over K, U, and lr");
  std::string sw_config, sw_outer, sw_inner, sw_lr, sw_out;
  sw->add_option("--config", sw_config)->required();
  sw->add_option("--outer", sw_outer);
  sw->add_option("--inner", sw_inner);
  sw->add_option("--lr", sw_lr);
  sw->add_option("--out", sw_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return cmd_gen_toy(spec, gen_out);
    if (ext->parsed()) return cmd_extract_patches(ext_slide, ext_out, ext_patch, ext_stride, ext_frac);
    if (st->parsed()) return cmd_stain_template(st_data, st_out);
    if (di->parsed()) return cmd_distill(di_config);
    if (co->parsed()) return cmd_coreset(co_data, co_method, co_m, co_out, co_seed, co_epochs);
    if (ev->parsed()) return cmd_eval(ev_config, ev_source, ev_syn, ev_coreset, ev_arch, ev_out);
    if (ca->parsed()) return cmd_cross_arch(ca_config, ca_syn, ca_out);
    if (mi->parsed()) return cmd_mil_eval(mi_config, mi_bags, mi_agg, mi_epochs, mi_out);
    if (tr->parsed())
      return cmd_transfer(tr_pre, tr_source, tr_fine, tr_syn, tr_test, tr_epochs, tr_arch, tr_seed,
                          tr_out);
    if (sw->parsed()) return cmd_sweep(sw_config, sw_outer, sw_inner, sw_lr, sw_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}

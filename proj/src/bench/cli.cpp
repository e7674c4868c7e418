// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "ulab/bench.hpp"
#include "ulab/checkpoint.hpp"
#include "ulab/errors.hpp"

namespace ulab::bench {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct ModelPaths {
  std::string config, encoder, diffusion, classifier;

  void add(CLI::App* app, bool with_classifier) {
    app->add_option("--config", config, "Experiment config JSON (defaults otherwise)");
    app->add_option("--encoder", encoder, "Encoder checkpoint directory (default: pretrained cache)");
    app->add_option("--diffusion", diffusion, "Diffusion checkpoint directory (default: pretrained cache)");
    if (with_classifier)
      app->add_option("--classifier", classifier, "Classifier checkpoint directory (default: pretrained cache)");
  }

  ExperimentConfig experiment() const { return config.empty() ? ExperimentConfig{} : ExperimentConfig::load(config); }

  // Fills in whatever was not given from the pretrained cache.
  Pretrained load() const {
    if (!encoder.empty() && !diffusion.empty() && !classifier.empty())
      return Pretrained{textbridge::load_encoder(encoder), latentcore::load_diffusion(diffusion),
                        judge::load_classifier(classifier), {}, true};
    Pretrained p = ensure_pretrained(experiment());
    if (!encoder.empty()) p.encoder.params().copy_values_from(textbridge::load_encoder(encoder).params());
    if (!diffusion.empty()) p.diffusion.params().copy_values_from(latentcore::load_diffusion(diffusion).params());
    if (!classifier.empty()) p.classifier.params().copy_values_from(judge::load_classifier(classifier).params());
    return p;
  }
};

struct UnlearnArgs {
  std::string concept_name = "red_circle";
  std::string forget_data, out;
  lru::UnlearnConfig cfg;
  ModelPaths models;

  void add(CLI::App* app, bool low_rank) {
    app->add_option("--concept", concept_name, "Concept to forget, e.g. red_circle");
    app->add_option("--forget-data", forget_data, "Forget corpus directory (default: generated)");
    app->add_option("--out", out, "Output directory");
    app->add_option("--epochs", cfg.epochs, "Epochs over the forget set");
    app->add_option("--seed", cfg.seed, "Unlearning seed");
    app->add_option("--lr", cfg.lr, "Encoder-layer learning rate");
    app->add_option("--trainable-blocks", cfg.trainable_blocks, "Unfrozen trailing text blocks");
    if (low_rank) {
      app->add_option("--rank", cfg.rank, "Rank of the perturbation");
      app->add_option("--lambda1", cfg.lambda1, "Retain weight");
      app->add_option("--lambda2", cfg.lambda2, "Forget weight");
      app->add_option("--lambda3", cfg.lambda3, "Regularizer weight");
      app->add_option("--low-rank-lr", cfg.low_rank_lr, "Learning rate of A and B");
    }
    models.add(app, false);
  }

  int run(bool low_rank) const {
    const auto target = synthworld::parse_concept(concept_name);
    cfg.validate(!low_rank);
    const synthworld::Corpus forget =
        forget_data.empty() ? synthworld::build_corpus(synthworld::Split::forget, target, 5,
                                                       derive_seed(cfg.seed, "data.forget"))
                            : synthworld::load_corpus(forget_data);
    Pretrained p = models.load();
    const std::string prompt = synthworld::make_caption(target);
    lru::UnlearnResult res =
        low_rank ? lru::unlearn_concept(p.diffusion, p.encoder, forget, prompt, lru::default_retain_prompts(target), cfg)
                 : lru::unlearn_negative_loss_baseline(p.diffusion, p.encoder, forget, prompt, cfg);
    const fs::path dir = resolve_output(out.empty() ? std::string(low_rank ? "unlearn/" : "unlearn-baseline/") +
                                                          concept_name + "_seed" + std::to_string(cfg.seed)
                                                    : out);
    const json prov = {{"forget_concept", concept_name},
                       {"seed", cfg.seed},
                       {"config", cfg.to_json()},
                       {"config_hash", sha256_hex(std::span<const unsigned char>(
                                           reinterpret_cast<const unsigned char*>(cfg.to_json().dump().data()),
                                           cfg.to_json().dump().size()))},
                       {"method", low_rank ? "low_rank" : "negative_loss"}};
    lru::save_unlearned(dir, res, prov);
    std::cout << res.log.to_csv();
    std::cout << "unlearning time " << res.log.unlearning_time_s << " s; written to " << dir.string() << "\n";
    return 0;
  }
};

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"ulab: low-rank concept unlearning lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a captioned shape corpus to PNG + manifest");
  std::string split = "pretrain", gen_concept, gen_out;
  std::size_t gen_n = 1600;
  std::uint64_t gen_seed = 0;
  gen->add_option("--split", split, "pretrain | forget | retain | eval");
  gen->add_option("--concept", gen_concept, "Target concept (forget/retain, optional for pretrain/eval)");
  gen->add_option("-n,--count", gen_n, "Number of images");
  gen->add_option("--seed", gen_seed, "Corpus seed");
  gen->add_option("--out", gen_out, "Output directory")->required();

  // pretrain-clip
  auto* pclip = app.add_subcommand("pretrain-clip", "Contrastive pretraining of the dual encoder");
  std::string pc_data, pc_out;
  textbridge::ContrastiveConfig pc_cfg;
  textbridge::EncoderConfig pc_enc;
  pclip->add_option("--data", pc_data, "Pretraining corpus directory")->required();
  pclip->add_option("--out", pc_out, "Encoder checkpoint directory")->required();
  pclip->add_option("--epochs", pc_cfg.epochs, "Epochs");
  pclip->add_option("--lr", pc_cfg.lr, "Learning rate");
  pclip->add_option("--seed", pc_enc.seed, "Seed");

  // pretrain-diffusion
  auto* pdiff = app.add_subcommand("pretrain-diffusion", "Train the VAE and the conditional U-Net");
  std::string pd_data, pd_enc, pd_out;
  latentcore::TrainConfig pd_cfg;
  std::uint64_t pd_seed = 0;
  pdiff->add_option("--data", pd_data, "Pretraining corpus directory")->required();
  pdiff->add_option("--encoder", pd_enc, "Pretrained encoder directory")->required();
  pdiff->add_option("--out", pd_out, "Diffusion checkpoint directory")->required();
  pdiff->add_option("--vae-epochs", pd_cfg.vae_epochs, "VAE epochs");
  pdiff->add_option("--unet-epochs", pd_cfg.unet_epochs, "U-Net epochs");
  pdiff->add_option("--seed", pd_seed, "Seed");

  // unlearn / unlearn-baseline
  auto* un = app.add_subcommand("unlearn", "Low-rank concept unlearning");
  UnlearnArgs un_args;
  un_args.add(un, true);
  auto* ub = app.add_subcommand("unlearn-baseline", "Negative-loss few-shot baseline");
  UnlearnArgs ub_args;
  ub_args.add(ub, false);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "CLIP scores, FID and detection rate for one model state");
  std::string ev_unlearned, ev_concept = "red_circle", ev_out, ev_label;
  judge::EvalConfig ev_cfg;
  ModelPaths ev_models;
  ev->add_option("--unlearned", ev_unlearned, "Unlearned state directory (default: the pretrained model)");
  ev->add_option("--concept", ev_concept, "Forget concept");
  ev->add_option("--samples", ev_cfg.forget_samples, "Forget-prompt samples");
  ev->add_option("--steps", ev_cfg.steps, "Sampling steps");
  ev->add_option("--guidance", ev_cfg.guidance, "Guidance weight");
  ev->add_option("--seed", ev_cfg.seed, "Sampling seed");
  ev->add_option("--label", ev_label, "Report label");
  ev->add_option("--out", ev_out, "Directory for metrics.json and metrics.csv");
  ev_models.add(ev, true);

  // plot-losses
  auto* pl = app.add_subcommand("plot-losses", "SVG of retain, forget and average loss per epoch");
  std::string pl_csv, pl_out;
  pl->add_option("run_log", pl_csv, "run_log.csv from an unlearning run")->required();
  pl->add_option("--out", pl_out, "Output SVG (default: next to the log)");

  // report
  auto* rep = app.add_subcommand("report", "Aggregate metrics.json files (mean +/- spread per label)");
  std::vector<std::string> rep_in;
  std::string rep_out;
  rep->add_option("inputs", rep_in, "Scenario directories or metrics.json files")->required();
  rep->add_option("--out", rep_out, "Write the aggregate as CSV");

  // run
  auto* run = app.add_subcommand("run", "Full scenario over a grid of trials");
  std::string run_config;
  std::size_t run_trials = 1;
  run->add_option("--config", run_config, "Experiment config JSON");
  run->add_option("--trials", run_trials, "Trials 0..n-1 on one pretrained model")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return 1;
  }

  if (gen->parsed()) {
    const auto s = synthworld::parse_split(split);
    std::optional<synthworld::Concept> c;
    if (!gen_concept.empty()) c = synthworld::parse_concept(gen_concept);
    const auto corpus = synthworld::build_corpus(s, c, gen_n, gen_seed);
    synthworld::save_corpus(gen_out, corpus);
    std::cout << corpus.items.size() << " images written to " << gen_out << "\n";
  } else if (pclip->parsed()) {
    const auto corpus = synthworld::load_corpus(pc_data);
    pc_cfg.seed = derive_seed(pc_enc.seed, "pretrain.clip");
    textbridge::DualEncoder enc(pc_enc);
    const auto log = textbridge::contrastive_pretrain(enc, corpus, pc_cfg);
    const auto m = textbridge::pair_margin(enc, corpus);
    textbridge::save_encoder(pc_out, enc, {{"epoch_loss", log.epoch_loss}, {"train_margin", m.margin()}});
    std::cout << "final loss " << log.epoch_loss.back() << ", pair margin " << m.margin() << "\n";
  } else if (pdiff->parsed()) {
    const auto corpus = synthworld::load_corpus(pd_data);
    const auto enc = textbridge::load_encoder(pd_enc);
    latentcore::DiffusionConfig dc;
    dc.seed = pd_seed;
    pd_cfg.seed = derive_seed(pd_seed, "pretrain.diffusion_train");
    latentcore::DiffusionModel dm(dc);
    const auto log = latentcore::train_diffusion(dm, corpus, enc, pd_cfg);
    latentcore::save_diffusion(pd_out, dm, {{"unet_epoch_loss", log.unet_epoch_loss}});
    std::cout << "reconstruction MSE " << latentcore::reconstruction_mse(dm, corpus) << "\n";
  } else if (un->parsed()) {
    return un_args.run(true);
  } else if (ub->parsed()) {
    return ub_args.run(false);
  } else if (ev->parsed()) {
    const auto target = synthworld::parse_concept(ev_concept);
    Pretrained p = ev_models.load();
    judge::ModelState st{&p.diffusion, &p.encoder, {}, 0.0};
    std::optional<lru::UnlearnResult> un_state;
    if (!ev_unlearned.empty()) {
      un_state.emplace(lru::load_unlearned(ev_unlearned));
      st.encoder = &un_state->encoder;
      if (un_state->low_rank.rank() > 0) st.delta_p = lru::delta_p(un_state->low_rank);
      st.unlearning_time_s = un_state->log.unlearning_time_s;
    }
    const ExperimentConfig ec = ev_models.experiment().resolved();
    const auto truth = synthworld::build_corpus(synthworld::Split::eval, target, ec.data.ground_truth_images,
                                                derive_seed(ec.seed, "data.ground_truth"));
    std::vector<Image> gt;
    for (const auto& it : truth.items) gt.push_back(it.image);
    auto e = judge::evaluate(st, p.encoder, p.classifier, target, lru::default_retain_prompts(target), gt, ev_cfg);
    e.report.label = ev_label.empty() ? (ev_unlearned.empty() ? "pre" : "post") : ev_label;
    if (!ev_out.empty()) {
      fs::create_directories(ev_out);
      write_text(fs::path(ev_out) / "metrics.json", json::array({e.report.to_json()}).dump(2) + "\n");
      write_text(fs::path(ev_out) / "metrics.csv",
                 judge::MetricsReport::csv_header() + "\n" + e.report.csv_row() + "\n");
    }
    std::cout << e.report.to_json().dump(2) << "\n";
  } else if (pl->parsed()) {
    const auto log = lru::UnlearnRunLog::from_csv(read_text(pl_csv));
    const fs::path out = pl_out.empty() ? fs::path(pl_csv).replace_extension(".svg") : fs::path(pl_out);
    const auto s = plot_losses(log, out);
    std::cout << s.points << " epochs plotted to " << out.string() << "; retain below forget every epoch: "
              << (s.retain_below_forget ? "yes" : "no") << "\n";
  } else if (rep->parsed()) {
    std::map<std::string, std::vector<judge::MetricsReport>> by_label;
    for (const auto& in : rep_in) {
      const fs::path p = fs::is_directory(in) ? fs::path(in) / "metrics.json" : fs::path(in);
      json j;
      try {
        j = json::parse(read_text(p));
      } catch (const json::exception& e) {
        throw ValidationError("cannot parse " + p.string() + ": " + e.what());
      }
      if (!j.is_array()) j = json::array({j});
      for (const auto& r : j) {
        auto m = judge::MetricsReport::from_json(r);
        by_label[m.label].push_back(m);
      }
    }
    std::string csv = "label,metric,mean,spread,n\n";
    for (const auto& [label, reps] : by_label) {
      const auto agg = aggregate(reps);
      std::cout << "[" << label << "]\n" << format_aggregate(agg);
      std::ostringstream os;
      os.precision(17);
      for (const auto& [name, s] : agg) os << label << ',' << name << ',' << s.mean << ',' << s.spread << ',' << s.n << "\n";
      csv += os.str();
    }
    if (!rep_out.empty()) write_text(rep_out, csv);
  } else if (run->parsed()) {
    ExperimentConfig cfg = run_config.empty() ? ExperimentConfig{} : ExperimentConfig::load(run_config);
    std::map<std::string, std::vector<judge::MetricsReport>> by_label;
    const std::string base_dir = cfg.output_dir;
    for (std::size_t t = 0; t < run_trials; ++t) {
      ExperimentConfig c = cfg;
      c.trial = t;
      if (!base_dir.empty()) c.output_dir = base_dir + "/trial" + std::to_string(t);
      const auto r = run_scenario(c);
      std::cout << "trial " << t << ": " << r.dir.string() << "\n";
      by_label["pre"].push_back(r.pre);
      by_label["post"].push_back(r.post);
      if (c.run_baseline) by_label["baseline"].push_back(r.baseline);
    }
    for (const auto& [label, reps] : by_label) std::cout << "[" << label << "]\n" << format_aggregate(aggregate(reps));
  }
  return 0;
}

}  // namespace

int cli(int argc, const char* const* argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeFailure& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ulab::bench

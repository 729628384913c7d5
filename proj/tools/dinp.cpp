#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "dinp/checkpoint.hpp"
#include "dinp/config.hpp"
#include "dinp/engine.hpp"
#include "dinp/phantom.hpp"
#include "dinp/service.hpp"
#include "dinp/trainer.hpp"
#include "dinp/verify.hpp"

namespace fs = std::filesystem;
using namespace dinp;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Common {
  std::string config;
};

// Precedence: --config, then $DINP_CONFIG, then built-in defaults. Flags
// applied afterwards override whatever the file set.
RunConfig load_config(const Common& c) {
  std::string path = c.config;
  if (path.empty())
    if (const char* env = std::getenv("DINP_CONFIG")) path = env;
  return path.empty() ? RunConfig{} : load_run_config(path);
}

struct SamplerFlags {
  std::optional<double> weight;
  std::optional<std::string> sampler;
  std::optional<int> steps;
  std::optional<double> eta;
  std::optional<std::string> rule;
  std::uint64_t seed = 0;

  void attach(CLI::App* app) {
    app->add_option("--weight", weight, "guidance weight W >= 0");
    app->add_option("--sampler", sampler, "ddim | ddpm");
    app->add_option("--steps", steps, "sampling steps (ddpm: defaults to T)");
    app->add_option("--eta", eta, "ddim stochasticity in [0,1]");
    app->add_option("--rule", rule, "standard | paper");
    app->add_option("--seed", seed, "sampling seed");
  }

  SamplerConfig resolve(SamplerConfig base, int schedule_steps) const {
    if (sampler) base.kind = parse_sampler_kind(*sampler);
    if (weight) base.weight = *weight;
    if (eta) base.eta = *eta;
    if (rule) base.rule = parse_guidance_rule(*rule);
    if (steps) base.steps = *steps;
    else if (base.kind == SamplerKind::ddpm) base.steps = schedule_steps;
    base.validate(schedule_steps);
    return base;
  }
};

struct InpaintFlags {
  std::string checkpoint;
  std::string image;
  std::array<std::string, kRoiChannels> masks;
  std::array<std::string, kRoiChannels> modes;
  SamplerFlags sampler;

  void attach(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    app->add_option("--image", image, "input slice PNG")->required();
    for (int k = 0; k < kRoiChannels; ++k) {
      app->add_option("--mask-ch" + std::to_string(k), masks[k], "ROI mask PNG for channel " + std::to_string(k));
      app->add_option("--mode-ch" + std::to_string(k), modes[k], "empty | freeform | bbox");
    }
    sampler.attach(app);
  }

  RawInpaintInput raw(const RunConfig& rc, const InferenceModel& model) const {
    RawInpaintInput r;
    r.image = read_png(image);
    for (int k = 0; k < kRoiChannels; ++k) {
      if (!masks[k].empty()) r.masks[k] = read_png(masks[k]);
      if (!modes[k].empty()) r.modes[k] = parse_channel_mode(modes[k]);
    }
    r.sampler = sampler.resolve(rc.sampler, model.schedule().steps());
    r.seed = sampler.seed;
    return r;
  }
};

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void report(const InpaintResult& r, const fs::path& out) {
  char secs[32];
  std::snprintf(secs, sizeof secs, "%.2fs", r.seconds);
  std::cerr << "wrote " << out.string() << "  cv " << r.cv.to_string() << "  " << to_string(r.sampler.kind) << " x"
            << r.steps_executed << "  W " << r.sampler.weight << "  seed " << r.seed << "  " << secs << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"Multitask diffusion inpainting engine"};
  app.require_subcommand(1);
  Common common;

  // phantoms
  auto* phantoms = app.add_subcommand("phantoms", "generate a phantom slice dataset");
  std::string ph_out;
  std::optional<int> ph_studies, ph_slices, ph_size;
  std::optional<std::uint64_t> ph_seed;
  phantoms->add_option("--config", common.config, "run configuration JSON");
  phantoms->add_option("--out", ph_out, "dataset directory")->required();
  phantoms->add_option("--studies", ph_studies);
  phantoms->add_option("--slices", ph_slices, "slices per study");
  phantoms->add_option("--size", ph_size, "image side");
  phantoms->add_option("--seed", ph_seed);

  // split
  auto* split = app.add_subcommand("split", "assign studies to train/validation/test");
  std::string sp_data;
  std::uint64_t sp_seed = 0;
  int sp_strata = 0;
  split->add_option("--data", sp_data, "dataset directory")->required();
  split->add_option("--seed", sp_seed);
  split->add_option("--strata", sp_strata, "tumor-area strata (0 = automatic)");

  // train
  auto* train = app.add_subcommand("train", "train the denoiser");
  std::string tr_data, tr_out;
  std::optional<int> tr_steps, tr_batch;
  std::optional<double> tr_lr;
  std::optional<std::uint64_t> tr_seed;
  train->add_option("--config", common.config, "run configuration JSON");
  train->add_option("--data", tr_data, "dataset directory with splits")->required();
  train->add_option("--out", tr_out, "checkpoint directory")->required();
  train->add_option("--steps", tr_steps);
  train->add_option("--batch", tr_batch);
  train->add_option("--lr", tr_lr);
  train->add_option("--seed", tr_seed);

  // inpaint
  auto* inpaint_cmd = app.add_subcommand("inpaint", "inpaint the ROI channels of one slice");
  InpaintFlags ip;
  std::string ip_out;
  ip.attach(inpaint_cmd);
  inpaint_cmd->add_option("--config", common.config, "run configuration JSON");
  inpaint_cmd->add_option("--out", ip_out, "output PNG")->required();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "weight or seed sweep over one request");
  InpaintFlags sw;
  std::string sw_kind, sw_out;
  std::vector<std::string> sw_values;
  sw.attach(sweep);
  sweep->add_option("--config", common.config, "run configuration JSON");
  sweep->add_option("--kind", sw_kind, "weight | seed")->required()->check(CLI::IsMember({"weight", "seed"}));
  sweep->add_option("--values", sw_values, "comma-separated values")->required()->delimiter(',');
  sweep->add_option("--out", sw_out, "output directory")->required();

  // scenario
  auto* scenario = app.add_subcommand("scenario", "preset-driven inpainting from a labeled slice");
  std::string sc_kind, sc_ckpt, sc_image, sc_label, sc_out;
  bool sc_bbox = false;
  SamplerFlags sc_sampler;
  scenario->add_option("--config", common.config, "run configuration JSON");
  scenario->add_option("--kind", sc_kind, "1 | 2 | 3 | simultaneous")->required();
  scenario->add_option("--checkpoint", sc_ckpt)->required();
  scenario->add_option("--image", sc_image, "input slice PNG")->required();
  scenario->add_option("--label", sc_label, "label PNG (0,1,2,4)")->required();
  scenario->add_flag("--bbox", sc_bbox, "bounding-box mode for every filled channel");
  scenario->add_option("--out", sc_out, "output PNG")->required();
  sc_sampler.attach(scenario);

  // serve
  auto* serve = app.add_subcommand("serve", "run the HTTP inference service");
  std::string sv_dir, sv_host = "127.0.0.1";
  int sv_port = 8080, sv_workers = 1;
  std::size_t sv_depth = 8;
  serve->add_option("--checkpoint-dir", sv_dir)->required();
  serve->add_option("--port", sv_port);
  serve->add_option("--host", sv_host);
  serve->add_option("--queue-depth", sv_depth);
  serve->add_option("--workers", sv_workers);

  // verify
  auto* verify = app.add_subcommand("verify", "run the gradient, schedule and pipeline suites");
  VerifyOptions vo;
  verify->add_option("--probes", vo.gradient_probes, "gradient probes per layer");
  verify->add_option("--samples", vo.monte_carlo_samples, "Monte Carlo samples per distribution check");
  verify->add_option("--draws", vo.pipeline_draws, "preprocessing draws");
  verify->add_option("--seed", vo.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  if (phantoms->parsed()) {
    RunConfig rc = load_config(common);
    if (ph_studies) rc.phantom.studies = *ph_studies;
    if (ph_slices) rc.phantom.slices_per_study = *ph_slices;
    if (ph_size) rc.phantom.image_size = *ph_size;
    if (ph_seed) rc.phantom.seed = *ph_seed;
    rc.phantom.validate();
    const auto ds = generate_corpus(rc.phantom);
    save_dataset(ph_out, ds);
    std::cerr << "wrote " << ds.size() << " records to " << ph_out << "\n";
    return 0;
  }
  if (split->parsed()) {
    const auto ds = load_dataset(sp_data);
    Rng rng(sp_seed);
    SplitOptions opt;
    opt.strata = sp_strata;
    const auto sp = split_dataset(ds.records, opt, rng);
    save_splits(sp_data, sp);
    for (const auto& w : sp.warnings) std::cerr << "warning: " << w << "\n";
    std::cerr << "studies train " << sp.study_count(Split::train) << " validation "
              << sp.study_count(Split::validation) << " test " << sp.study_count(Split::test) << "\n";
    return 0;
  }
  if (train->parsed()) {
    RunConfig rc = load_config(common);
    if (tr_steps) rc.train.total_steps = *tr_steps;
    if (tr_batch) rc.train.batch_size = *tr_batch;
    if (tr_lr) rc.train.learning_rate = *tr_lr;
    if (tr_seed) rc.train.seed = *tr_seed;
    rc.validate();
    const auto ds = load_dataset(tr_data);
    const auto sp = load_splits(tr_data);
    if (!sp) throw ConfigError("dataset " + tr_data + " has no split assignment; run `dinp split` first");
    FitOptions fo;
    fo.out_dir = tr_out;
    fo.on_step = [](const MetricRecord& r) {
      if (r.val_mse || r.step % 50 == 0) std::cerr << to_json(r).dump() << "\n";
    };
    const auto res = fit(rc, ds, *sp, fo);
    std::cerr << "wrote " << res.checkpoints.size() << " checkpoints to " << tr_out << "\n";
    return 0;
  }
  if (inpaint_cmd->parsed()) {
    const RunConfig rc = load_config(common);
    const auto model = InferenceModel::load(ip.checkpoint);
    const auto req = build_request(ip.raw(rc, *model));
    const auto res = inpaint(*model, req);
    write_bytes(ip_out, result_png(res));
    report(res, ip_out);
    return 0;
  }
  if (sweep->parsed()) {
    const RunConfig rc = load_config(common);
    const auto model = InferenceModel::load(sw.checkpoint);
    const auto req = build_request(sw.raw(rc, *model));
    std::vector<InpaintResult> results;
    try {
      if (sw_kind == "weight") {
        std::vector<double> ws;
        for (const auto& v : sw_values) ws.push_back(std::stod(v));
        results = weight_sweep(*model, req, ws);
      } else {
        std::vector<std::uint64_t> seeds;
        for (const auto& v : sw_values) seeds.push_back(std::stoull(v));
        results = seed_sweep(*model, req, seeds);
      }
    } catch (const std::logic_error& e) {
      throw std::invalid_argument(std::string("bad --values: ") + e.what());
    }
    for (std::size_t i = 0; i < results.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sweep-%03zu.png", i);
      const fs::path out = fs::path(sw_out) / name;
      write_bytes(out, result_png(results[i]));
      report(results[i], out);
    }
    return 0;
  }
  if (scenario->parsed()) {
    const RunConfig rc = load_config(common);
    const auto model = InferenceModel::load(sc_ckpt);
    const auto kind = parse_scenario_kind(sc_kind);
    const auto image = SliceImage::from_gray8(read_png(sc_image));
    const auto label = LabelMask::from_gray8(read_png(sc_label), sc_label);
    const auto req = scenario_preset(kind, image, label, sc_bbox, sc_sampler.resolve(rc.sampler, model->schedule().steps()),
                                     sc_sampler.seed);
    const auto res = inpaint(*model, req);
    write_bytes(sc_out, result_png(res));
    report(res, sc_out);
    return 0;
  }
  if (serve->parsed()) {
    InpaintService service({sv_dir, sv_depth, sv_workers});
    service.start_loading();
    HttpServer server(service);
    std::cerr << "serving " << sv_dir << " on http://" << sv_host << ":" << sv_port << "\n";
    if (!server.listen(sv_host, sv_port)) throw std::runtime_error("cannot listen on " + sv_host + ":" + std::to_string(sv_port));
    return 0;
  }
  if (verify->parsed()) {
    const auto reports = verify_all(vo);
    return print_reports(std::cout, reports) ? 0 : kExitValidation;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ApiError& e) {
    std::cerr << "error: " << (e.field().empty() ? "" : e.field() + ": ") << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ImageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

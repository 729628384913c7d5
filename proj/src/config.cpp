#include "dinp/config.hpp"

#include <fstream>
#include <set>

namespace dinp {

using json = nlohmann::json;

void DiffusionConfig::validate() const {
  if (steps < 2) throw ConfigError("diffusion.steps must be >= 2");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train.ema_decay must lie in [0,1)");
  if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip must be > 0");
  if (!(augment.max_rotation_deg >= 0.0 && augment.max_rotation_deg <= 180.0))
    throw ConfigError("train.augment.max_rotation_deg must lie in [0,180]");
  if (validate_every < 1 || checkpoint_every < 1) throw ConfigError("train cadences must be >= 1");
  if (validation_samples < 1) throw ConfigError("train.validation_samples must be >= 1");
  if (oversample_factor < 1) throw ConfigError("train.oversample_factor must be >= 1");
  try {
    policy.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train.policy: ") + e.what());
  }
}

void RunConfig::validate() const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(section) + ": " + e.what());
    }
  };
  wrap("phantom", [&] { phantom.validate(); });
  wrap("diffusion", [&] { diffusion.validate(); });
  wrap("unet", [&] { unet.validate(); });
  if (unet.image_size != phantom.image_size)
    throw ConfigError("unet.image_size (" + std::to_string(unet.image_size) + ") must equal phantom.image_size (" +
                      std::to_string(phantom.image_size) + ")");
  train.validate();
  wrap("sampler", [&] { sampler.validate(diffusion.steps); });
}

namespace {

// Reads fields from one JSON object and rejects anything it did not consume.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + " has the wrong type");
    }
  }

  template <typename F>
  void read_with(const char* key, F&& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      fn(j_.at(key), path_ + "." + key);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError("unknown key " + path_ + "." + k);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json intensities_to_json(const IntensityTable& t) {
  json j = json::object();
  for (int tissue = 0; tissue < kTissueCount; ++tissue) {
    json row = json::object();
    for (Sequence s : kSequences) {
      const auto& st = t[tissue][static_cast<int>(s)];
      row[to_string(s)] = {{"mean", st.mean}, {"spread", st.spread}};
    }
    j[to_string(static_cast<Tissue>(tissue))] = row;
  }
  return j;
}

void intensities_from_json(const json& j, const std::string& path, IntensityTable& t) {
  Section sec(j, path);
  for (int tissue = 0; tissue < kTissueCount; ++tissue) {
    const std::string name = to_string(static_cast<Tissue>(tissue));
    sec.read_with(name.c_str(), [&](const json& row, const std::string& row_path) {
      Section rs(row, row_path);
      for (Sequence s : kSequences) {
        const std::string seq = to_string(s);
        rs.read_with(seq.c_str(), [&](const json& cell, const std::string& cell_path) {
          Section cs(cell, cell_path);
          auto& st = t[tissue][static_cast<int>(s)];
          cs.read("mean", st.mean);
          cs.read("spread", st.spread);
          cs.finish();
        });
      }
      rs.finish();
    });
  }
  sec.finish();
}

json phantom_to_json(const PhantomSpec& p) {
  return {{"image_size", p.image_size},
          {"tumor_probability", p.tumor_probability},
          {"texture_amplitude", p.texture_amplitude},
          {"seed", p.seed},
          {"studies", p.studies},
          {"slices_per_study", p.slices_per_study},
          {"intensities", intensities_to_json(p.intensities)}};
}

void phantom_from_json(const json& j, const std::string& path, PhantomSpec& p) {
  Section s(j, path);
  s.read("image_size", p.image_size);
  s.read("tumor_probability", p.tumor_probability);
  s.read("texture_amplitude", p.texture_amplitude);
  s.read("seed", p.seed);
  s.read("studies", p.studies);
  s.read("slices_per_study", p.slices_per_study);
  s.read_with("intensities", [&](const json& v, const std::string& sub) { intensities_from_json(v, sub, p.intensities); });
  s.finish();
}

json policy_to_json(const ScenarioPolicy& p) {
  return {{"components", p.components},
          {"merged", p.merged},
          {"normal_alone", p.normal_alone},
          {"add_normal", p.add_normal},
          {"bbox_probability", p.bbox_probability},
          {"dropout", p.dropout},
          {"normal_roi_enabled", p.normal_roi_enabled},
          {"normal_shapes_min", p.geometry.min_shapes},
          {"normal_shapes_max", p.geometry.max_shapes},
          {"normal_radius_min", p.geometry.min_radius},
          {"normal_radius_max", p.geometry.max_radius},
          {"normal_max_tries", p.geometry.max_tries}};
}

void policy_from_json(const json& j, const std::string& path, ScenarioPolicy& p) {
  Section s(j, path);
  s.read("components", p.components);
  s.read("merged", p.merged);
  s.read("normal_alone", p.normal_alone);
  s.read("add_normal", p.add_normal);
  s.read("bbox_probability", p.bbox_probability);
  s.read("dropout", p.dropout);
  s.read("normal_roi_enabled", p.normal_roi_enabled);
  s.read("normal_shapes_min", p.geometry.min_shapes);
  s.read("normal_shapes_max", p.geometry.max_shapes);
  s.read("normal_radius_min", p.geometry.min_radius);
  s.read("normal_radius_max", p.geometry.max_radius);
  s.read("normal_max_tries", p.geometry.max_tries);
  s.finish();
}

json train_to_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"total_steps", t.total_steps},
          {"ema_decay", t.ema_decay},
          {"grad_clip", t.grad_clip},
          {"augment",
           {{"flips", t.augment.flips},
            {"rotations", t.augment.rotations},
            {"max_rotation_deg", t.augment.max_rotation_deg}}},
          {"validate_every", t.validate_every},
          {"validation_samples", t.validation_samples},
          {"checkpoint_every", t.checkpoint_every},
          {"oversample_factor", t.oversample_factor},
          {"seed", t.seed},
          {"policy", policy_to_json(t.policy)}};
}

void train_from_json(const json& j, const std::string& path, TrainConfig& t) {
  Section s(j, path);
  s.read("learning_rate", t.learning_rate);
  s.read("batch_size", t.batch_size);
  s.read("total_steps", t.total_steps);
  s.read("ema_decay", t.ema_decay);
  s.read("grad_clip", t.grad_clip);
  s.read_with("augment", [&](const json& v, const std::string& sub) {
    Section a(v, sub);
    a.read("flips", t.augment.flips);
    a.read("rotations", t.augment.rotations);
    a.read("max_rotation_deg", t.augment.max_rotation_deg);
    a.finish();
  });
  s.read("validate_every", t.validate_every);
  s.read("validation_samples", t.validation_samples);
  s.read("checkpoint_every", t.checkpoint_every);
  s.read("oversample_factor", t.oversample_factor);
  s.read("seed", t.seed);
  s.read_with("policy", [&](const json& v, const std::string& sub) { policy_from_json(v, sub, t.policy); });
  s.finish();
}

}  // namespace

json to_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels},   {"out_channels", c.out_channels},
          {"base_width", c.base_width},     {"multipliers", c.multipliers},
          {"res_blocks", c.res_blocks},     {"attention_levels", c.attention_levels},
          {"time_width", c.time_width},     {"code_width", c.code_width},
          {"embed_width", c.embed_width},   {"head_width", c.head_width},
          {"image_size", c.image_size}};
}

UNetConfig unet_config_from_json(const json& j) {
  UNetConfig c;
  Section s(j, "unet");
  s.read("in_channels", c.in_channels);
  s.read("out_channels", c.out_channels);
  s.read("base_width", c.base_width);
  s.read("multipliers", c.multipliers);
  s.read("res_blocks", c.res_blocks);
  s.read("attention_levels", c.attention_levels);
  s.read("time_width", c.time_width);
  s.read("code_width", c.code_width);
  s.read("embed_width", c.embed_width);
  s.read("head_width", c.head_width);
  s.read("image_size", c.image_size);
  s.finish();
  return c;
}

json to_json(const DiffusionConfig& c) { return {{"schedule", to_string(c.schedule)}, {"steps", c.steps}}; }

DiffusionConfig diffusion_config_from_json(const json& j) {
  DiffusionConfig c;
  Section s(j, "diffusion");
  s.read_with("schedule", [&](const json& v, const std::string&) { c.schedule = parse_schedule_kind(v.get<std::string>()); });
  s.read("steps", c.steps);
  s.finish();
  return c;
}

json to_json(const SamplerConfig& c) {
  return {{"kind", to_string(c.kind)}, {"steps", c.steps}, {"eta", c.eta}, {"weight", c.weight}, {"rule", to_string(c.rule)}};
}

SamplerConfig sampler_config_from_json(const json& j) {
  SamplerConfig c;
  Section s(j, "sampler");
  s.read_with("kind", [&](const json& v, const std::string&) { c.kind = parse_sampler_kind(v.get<std::string>()); });
  s.read("steps", c.steps);
  s.read("eta", c.eta);
  s.read("weight", c.weight);
  s.read_with("rule", [&](const json& v, const std::string&) { c.rule = parse_guidance_rule(v.get<std::string>()); });
  s.finish();
  return c;
}

json to_json(const RunConfig& c) {
  return {{"phantom", phantom_to_json(c.phantom)},
          {"diffusion", to_json(c.diffusion)},
          {"unet", to_json(c.unet)},
          {"train", train_to_json(c.train)},
          {"sampler", to_json(c.sampler)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section s(j, "config");
  s.read_with("phantom", [&](const json& v, const std::string& p) { phantom_from_json(v, p, c.phantom); });
  s.read_with("diffusion", [&](const json& v, const std::string&) { c.diffusion = diffusion_config_from_json(v); });
  s.read_with("unet", [&](const json& v, const std::string&) { c.unet = unet_config_from_json(v); });
  s.read_with("train", [&](const json& v, const std::string& p) { train_from_json(v, p, c.train); });
  s.read_with("sampler", [&](const json& v, const std::string&) { c.sampler = sampler_config_from_json(v); });
  s.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace dinp

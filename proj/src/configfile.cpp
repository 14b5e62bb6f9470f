#include "bodysplat/configfile.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace bodysplat {

namespace {

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw schema_error("config: bad integer for " + key + ": '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    const uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw schema_error("config: bad integer for " + key + ": '" + v + "'");
  }
}

Scalar parse_scalar(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    const Scalar out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw schema_error("config: bad number for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw schema_error("config: bad boolean for " + key + ": '" + v + "'");
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void set_config_key(TrainConfig* cfg, const std::string& key, const std::string& value) {
  auto i = [&] { return parse_int(key, value); };
  auto u = [&] { return parse_u64(key, value); };
  auto s = [&] { return parse_scalar(key, value); };
  auto b = [&] { return parse_bool(key, value); };

  if (key == "model.d") cfg->model.d = i();
  else if (key == "model.patch") cfg->model.patch = i();
  else if (key == "model.heads") cfg->model.heads = i();
  else if (key == "model.n_intra") cfg->model.n_intra = i();
  else if (key == "model.n_inter") cfg->model.n_inter = i();
  else if (key == "model.k_win") cfg->model.k_win = i();
  else if (key == "model.channels") cfg->model.channels = i();
  else if (key == "model.latent_h") cfg->model.latent_h = i();
  else if (key == "model.latent_w") cfg->model.latent_w = i();
  else if (key == "model.n_views") cfg->model.n_views = i();
  else if (key == "model.scale_min") cfg->model.scale_min = s();
  else if (key == "model.scale_max") cfg->model.scale_max = s();
  else if (key == "scene.schedule_elevation") cfg->scene.schedule_elevation = s();
  else if (key == "scene.orbit_scale") cfg->scene.orbit_scale = s();
  else if (key == "scene.focal_scale") cfg->scene.focal_scale = s();
  else if (key == "scene.render_h") cfg->scene.render_h = i();
  else if (key == "scene.render_w") cfg->scene.render_w = i();
  else if (key == "scene.body_views") cfg->scene.body_views = i();
  else if (key == "scene.body_elevation") cfg->scene.body_elevation = s();
  else if (key == "scene.head_views") cfg->scene.head_views = i();
  else if (key == "scene.head_orbit_scale") cfg->scene.head_orbit_scale = s();
  else if (key == "scene.head_focal_scale") cfg->scene.head_focal_scale = s();
  else if (key == "scene.head_level_weight") cfg->scene.head_level_weight = s();
  else if (key == "scene.holdout_views") cfg->scene.holdout_views = i();
  else if (key == "scene.holdout_elevation") cfg->scene.holdout_elevation = s();
  else if (key == "scene.pose_amplitude") cfg->scene.pose_amplitude = s();
  else if (key == "scene.color_noise") cfg->scene.color_noise = s();
  else if (key == "scene.supersample") cfg->scene.supersample = i();
  else if (key == "loss.lambda_p") cfg->loss.lambda_p = s();
  else if (key == "loss.lambda_m") cfg->loss.lambda_m = s();
  else if (key == "loss.input_view_weight") cfg->loss.input_view_weight = s();
  else if (key.rfind("loss.part_weight.", 0) == 0) {
    const int part = parse_int(key, key.substr(std::string("loss.part_weight.").size()));
    if (part < 1 || part > kNumParts) throw schema_error("config: part index out of range in " + key);
    cfg->loss.part_weights[part - 1] = s();
  }
  else if (key == "optim.peak_lr") cfg->optim.peak_lr = s();
  else if (key == "optim.warmup_steps") cfg->optim.warmup_steps = i();
  else if (key == "optim.total_steps") cfg->optim.total_steps = i();
  else if (key == "optim.beta1") cfg->optim.beta1 = s();
  else if (key == "optim.beta2") cfg->optim.beta2 = s();
  else if (key == "optim.eps") cfg->optim.eps = s();
  else if (key == "optim.weight_decay") cfg->optim.weight_decay = s();
  else if (key == "optim.clip_norm") cfg->optim.clip_norm = s();
  else if (key == "train.n_scenes") cfg->n_scenes = i();
  else if (key == "train.model_seed") cfg->model_seed = u();
  else if (key == "train.scene_seed") cfg->scene_seed = u();
  else if (key == "train.log_every") cfg->log_every = i();
  else if (key == "train.use_human_prior") cfg->use_human_prior = b();
  else throw schema_error("config: unknown key '" + key + "'");
}

void apply_config_file(TrainConfig* cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open config: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw schema_error("config: missing '=' at " + path + ":" + std::to_string(lineno));
    set_config_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

TrainConfig load_train_config(const std::string& path) {
  TrainConfig cfg;
  apply_config_file(&cfg, path);
  return cfg;
}

void write_config_file(const std::string& path, const TrainConfig& cfg) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open config for writing: " + path);
  f.precision(17);
  f << "# reconstruction model\n";
  f << "model.d = " << cfg.model.d << "\n";
  f << "model.patch = " << cfg.model.patch << "\n";
  f << "model.heads = " << cfg.model.heads << "\n";
  f << "model.n_intra = " << cfg.model.n_intra << "\n";
  f << "model.n_inter = " << cfg.model.n_inter << "\n";
  f << "model.k_win = " << cfg.model.k_win << "\n";
  f << "model.channels = " << cfg.model.channels << "\n";
  f << "model.latent_h = " << cfg.model.latent_h << "\n";
  f << "model.latent_w = " << cfg.model.latent_w << "\n";
  f << "model.n_views = " << cfg.model.n_views << "\n";
  f << "model.scale_min = " << cfg.model.scale_min << "\n";
  f << "model.scale_max = " << cfg.model.scale_max << "\n";
  f << "\n# synthetic scenes\n";
  f << "scene.schedule_elevation = " << cfg.scene.schedule_elevation << "\n";
  f << "scene.orbit_scale = " << cfg.scene.orbit_scale << "\n";
  f << "scene.focal_scale = " << cfg.scene.focal_scale << "\n";
  f << "scene.render_h = " << cfg.scene.render_h << "\n";
  f << "scene.render_w = " << cfg.scene.render_w << "\n";
  f << "scene.body_views = " << cfg.scene.body_views << "\n";
  f << "scene.body_elevation = " << cfg.scene.body_elevation << "\n";
  f << "scene.head_views = " << cfg.scene.head_views << "\n";
  f << "scene.head_orbit_scale = " << cfg.scene.head_orbit_scale << "\n";
  f << "scene.head_focal_scale = " << cfg.scene.head_focal_scale << "\n";
  f << "scene.head_level_weight = " << cfg.scene.head_level_weight << "\n";
  f << "scene.holdout_views = " << cfg.scene.holdout_views << "\n";
  f << "scene.holdout_elevation = " << cfg.scene.holdout_elevation << "\n";
  f << "scene.pose_amplitude = " << cfg.scene.pose_amplitude << "\n";
  f << "scene.color_noise = " << cfg.scene.color_noise << "\n";
  f << "scene.supersample = " << cfg.scene.supersample << "\n";
  f << "\n# objective\n";
  f << "loss.lambda_p = " << cfg.loss.lambda_p << "\n";
  f << "loss.lambda_m = " << cfg.loss.lambda_m << "\n";
  f << "loss.input_view_weight = " << cfg.loss.input_view_weight << "\n";
  for (int p = 1; p <= kNumParts; ++p)
    f << "loss.part_weight." << p << " = " << cfg.loss.part_weights[p - 1] << "\n";
  f << "\n# optimizer\n";
  f << "optim.peak_lr = " << cfg.optim.peak_lr << "\n";
  f << "optim.warmup_steps = " << cfg.optim.warmup_steps << "\n";
  f << "optim.total_steps = " << cfg.optim.total_steps << "\n";
  f << "optim.beta1 = " << cfg.optim.beta1 << "\n";
  f << "optim.beta2 = " << cfg.optim.beta2 << "\n";
  f << "optim.eps = " << cfg.optim.eps << "\n";
  f << "optim.weight_decay = " << cfg.optim.weight_decay << "\n";
  f << "optim.clip_norm = " << cfg.optim.clip_norm << "\n";
  f << "\n# training driver\n";
  f << "train.n_scenes = " << cfg.n_scenes << "\n";
  f << "train.model_seed = " << cfg.model_seed << "\n";
  f << "train.scene_seed = " << cfg.scene_seed << "\n";
  f << "train.log_every = " << cfg.log_every << "\n";
  f << "train.use_human_prior = " << (cfg.use_human_prior ? 1 : 0) << "\n";
  if (!f) throw io_error("failed writing config: " + path);
}

}  // namespace bodysplat

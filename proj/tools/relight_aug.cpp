// relight-aug: command-line front end for the relighting toolkit.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "relight/relight.hpp"

using namespace relight;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<double> parse_vector(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      v.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw ValidationError("cannot parse '" + cell + "' as a number");
    }
  }
  return v;
}

/// Spec file: a list of ProbeSpec objects (ids by position) or
/// {"probes": [{"id": k, ...spec fields}, ...]}.
std::vector<std::pair<int, ProbeSpec>> read_probe_specs(const fs::path& path) {
  const auto j = read_json(path);
  const auto& list = j.is_array() ? j : j.at("probes");
  std::vector<std::pair<int, ProbeSpec>> out;
  for (std::size_t k = 0; k < list.size(); ++k)
    out.emplace_back(list[k].value("id", static_cast<int>(k)), list[k].get<ProbeSpec>());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relighting-based data augmentation toolkit"};
  app.require_subcommand(1);

  // render-probes
  auto* rp = app.add_subcommand("render-probes", "Render analytic light probes from a spec file");
  std::string rp_spec, rp_out;
  rp->add_option("--spec", rp_spec, "JSON list of probe specs")->required()->check(CLI::ExistingFile);
  rp->add_option("--out", rp_out, "Output directory")->required();

  // avg-probes
  auto* ap = app.add_subcommand("avg-probes", "Average per-scene probes into a scene-agnostic set");
  std::string ap_manifest, ap_out;
  ap->add_option("--manifest", ap_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ap->add_option("--out", ap_out, "Output directory")->required();

  // synth-data
  auto* sd = app.add_subcommand("synth-data", "Generate the procedural toy dataset");
  ToyDatasetOptions sd_opt;
  int sd_lights = 8, sd_probe_size = 64;
  std::string sd_out;
  sd->add_option("--scenes", sd_opt.n_scenes, "Number of scenes")->capture_default_str();
  sd->add_option("--lights", sd_lights, "Number of illuminations")->capture_default_str();
  sd->add_option("--size", sd_opt.image_size, "Image side in pixels")->capture_default_str();
  sd->add_option("--probe-size", sd_probe_size, "Probe side in pixels")->capture_default_str();
  sd->add_option("--seed", sd_opt.seed, "Base seed")->capture_default_str();
  sd->add_flag("--scene-probes", sd_opt.scene_probes, "Also write jittered per-scene probes");
  sd->add_option("--out", sd_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train the relighting network");
  std::string tr_manifest, tr_probes, tr_config, tr_out;
  bool tr_resume = false;
  tr->add_option("--manifest", tr_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--probes", tr_probes, "Scene-agnostic probe directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--config", tr_config, "JSON with model, train and extractor sections")->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();
  tr->add_flag("--resume", tr_resume, "Continue from <out>/last.rlt");

  // train-vae
  auto* tv = app.add_subcommand("train-vae", "Train the probe beta-VAE");
  std::string tv_probes, tv_config, tv_out = "vae.rlt";
  int tv_synthetic = 200;
  tv->add_option("--probes", tv_probes, "Probe directory")->required()->check(CLI::ExistingDirectory);
  tv->add_option("--config", tv_config, "VAE config JSON")->check(CLI::ExistingFile);
  tv->add_option("--synthetic", tv_synthetic, "Extra rendered probes added to the corpus")->capture_default_str();
  tv->add_option("--out", tv_out, "Output archive")->capture_default_str();

  // sample-probe
  auto* sp = app.add_subcommand("sample-probe", "Decode a probe from a latent vector");
  std::string sp_ckpt, sp_z, sp_out;
  sp->add_option("--ckpt", sp_ckpt, "VAE archive")->required()->check(CLI::ExistingFile);
  sp->add_option("--z", sp_z, "Comma-separated latent vector")->required();
  sp->add_option("--out", sp_out, "Output PNG")->required();

  // augment
  auto* au = app.add_subcommand("augment", "Pre-generate relit variants and a pool index");
  std::string au_ckpt, au_images, au_probes, au_out;
  AugmentOptions au_opt;
  au->add_option("--ckpt", au_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  au->add_option("--images", au_images, "Directory of PNG images")->required()->check(CLI::ExistingDirectory);
  au->add_option("--probes", au_probes, "Guide probe directory")->required()->check(CLI::ExistingDirectory);
  au->add_option("--out", au_out, "Output directory")->required();
  au->add_flag("--overwrite", au_opt.overwrite, "Replace an existing pool");

  // eval
  auto* ev = app.add_subcommand("eval", "Score matches and homographies");
  std::string ev_mode, ev_pairs, ev_report;
  EvalConfig ev_cfg;
  ev->add_option("mode", ev_mode, "mma | homography | pr")->required()->check(CLI::IsMember({"mma", "homography", "pr"}));
  ev->add_option("--pairs", ev_pairs, "Pairs manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--threshold", ev_cfg.pixel_threshold, "Pixel threshold")->capture_default_str();
  ev->add_option("--corner-eps", ev_cfg.corner_eps, "Mean corner error bound")->capture_default_str();
  ev->add_option("--width", ev_cfg.image_width, "Default image width");
  ev->add_option("--height", ev_cfg.image_height, "Default image height");
  ev->add_option("--report", ev_report, "Report JSON path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*rp) {
      fs::create_directories(rp_out);
      for (const auto& [id, spec] : read_probe_specs(rp_spec)) {
        auto p = render_probe(spec);
        p.illumination_id = id;
        save_probe(p, fs::path(rp_out) / probe_filename(id));
      }
    } else if (*ap) {
      auto set = build_scene_agnostic_set(load_manifest(ap_manifest));
      save_probe_set(set, ap_out);
      std::cout << "wrote " << set.probes.size() << " probes to " << ap_out << "\n";
    } else if (*sd) {
      const auto m = build_toy_dataset(default_light_specs(sd_lights, sd_probe_size), sd_opt, sd_out);
      std::cout << "wrote " << m.scenes.size() << " scenes x " << m.probes.size() << " lights to " << sd_out << "\n";
    } else if (*tr) {
      nlohmann::json cfg = tr_config.empty() ? nlohmann::json::object() : read_json(tr_config);
      const auto model = cfg.value("model", nlohmann::json::object()).get<ModelConfig>();
      auto train = cfg.value("train", nlohmann::json::object()).get<TrainConfig>();
      if (!cfg.contains("train") || !cfg["train"].contains("image_size")) train.image_size = model.input_size;
      const auto fx = cfg.value("extractor", nlohmann::json::object()).get<FeatureExtractorSpec>();
      FitOptions opt;
      opt.out_dir = tr_out;
      opt.resume = tr_resume;
      opt.on_record = [](const nlohmann::json& r) {
        if (!r["val_total"].is_null())
          std::cout << "epoch " << r["epoch"] << " val_total " << r["val_total"] << " lr " << r["lr"] << std::endl;
      };
      const auto res = fit(load_manifest(tr_manifest), load_probe_set(tr_probes), model, train, fx, opt);
      std::cout << "best val_total " << res.best_val << "; checkpoints in " << tr_out << "\n";
    } else if (*tv) {
      VaeConfig cfg = tv_config.empty() ? VaeConfig{} : read_json(tv_config).get<VaeConfig>();
      std::vector<LightProbe> corpus = load_probe_set(tv_probes).probes;
      for (const auto& s : random_probe_specs(tv_synthetic, cfg.seed, cfg.probe_size)) corpus.push_back(render_probe(s));
      const auto res = train_vae(corpus, cfg);
      save_vae(res.state, tv_out);
      std::cout << "final epoch loss " << (res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back()) << "; wrote " << tv_out << "\n";
    } else if (*sp) {
      const auto st = load_vae(sp_ckpt);
      save_png(sample_probe(st, parse_vector(sp_z)).pixels, sp_out);
    } else if (*au) {
      const auto net = load_model(au_ckpt);
      const auto rep = relight_dataset(net, au_images, load_probe_set(au_probes), au_out, au_opt);
      std::cout << "wrote " << rep.variants_written << " variants for " << rep.pool.entries.size() << " images\n";
      for (const auto& [file, why] : rep.failures) std::cerr << "failed: " << file << ": " << why << "\n";
      if (!rep.failures.empty()) return 3;
    } else if (*ev) {
      const auto report = run_eval(parse_eval_mode(ev_mode), load_pairs_manifest(ev_pairs), ev_cfg);
      write_json(report, ev_report);
      std::cout << report["aggregate"].dump() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

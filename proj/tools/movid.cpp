// movid: data generation, training, evaluation, streaming benchmark, and
// gradient checking for the view-disentangled pose pipeline.
//
// Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
// 3 I/O failure. MOVID_THREADS caps internal parallelism.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "movid/common.hpp"
#include "movid/config.hpp"
#include "movid/dataset_io.hpp"
#include "movid/eval.hpp"
#include "movid/geometry.hpp"
#include "movid/gradcheck.hpp"
#include "movid/model.hpp"
#include "movid/streaming.hpp"
#include "movid/trainer.hpp"

namespace {

using nlohmann::json;

std::string now_iso8601() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw movid::IoError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw movid::IoError("cannot write " + path);
  f << content;
  if (!f) throw movid::IoError("short write to " + path);
}

std::string content_hash(const std::string& bytes) {
  return movid::hex64(movid::fnv1a64(bytes.data(), bytes.size()));
}

// Every command leaves one <out>.run.json next to its outputs. config_hash +
// seed + input hashes pin the run down completely.
struct RunManifest {
  std::string command;
  std::string config_hash;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, hash
  std::string started_at;
  std::vector<std::string> outputs;

  void write(const std::string& path) const {
    json j;
    j["command"] = command;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["inputs"] = json::array();
    for (const auto& [p, h] : inputs) j["inputs"].push_back({{"path", p}, {"fnv64", h}});
    j["started_at"] = started_at;
    j["finished_at"] = now_iso8601();
    j["outputs"] = outputs;
    write_file(path, j.dump(2) + "\n");
  }
};

movid::AblationSpec parse_ablation(const std::string& name) {
  if (name == "none") return {};
  if (name == "no-projection") return {true, false, false};
  if (name == "no-ortho") return {false, true, false};
  if (name == "no-align") return {false, false, true};
  throw movid::InvalidArg("unknown ablation: " + name +
                          " (expected none|no-projection|no-ortho|no-align)");
}

// Checkpoints carry their exact training config as a sidecar INI; loading
// re-parses it so the rebuilt model cannot drift from the trained one.
struct LoadedModel {
  movid::TrainConfig cfg;
  std::unique_ptr<movid::MovidModel> model;
  std::string ablation = "none";
};

LoadedModel load_checkpoint(const std::string& prefix) {
  LoadedModel lm;
  lm.cfg = movid::parse_train_config(read_file(prefix + ".config.ini"));
  for (const auto& [k, v] : movid::ParamStore::read_meta(prefix))
    if (k == "ablation") lm.ablation = v;
  movid::ModelConfig mc = lm.cfg.model;
  mc.use_projection = !parse_ablation(lm.ablation).disable_projection;
  lm.model = std::make_unique<movid::MovidModel>(mc);
  lm.model->params.load(prefix);
  return lm;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int clips, int views, double noise_px, double occ_prob,
                 uint64_t seed, int frames) {
  RunManifest man;
  man.command = "gen-data";
  man.started_at = now_iso8601();
  man.seed = seed;
  {
    std::string cfg = "clips=" + std::to_string(clips) + ";views=" + std::to_string(views) +
                      ";noise_px=" + movid::format_g17(noise_px) +
                      ";occ_prob=" + movid::format_g17(occ_prob) +
                      ";frames=" + std::to_string(frames);
    man.config_hash = content_hash(cfg);
  }

  const auto grid = movid::camera_grid();
  std::vector<movid::CameraPose> cams(grid.begin(), grid.begin() + views);
  const movid::NoiseSpec noise{noise_px, occ_prob};
  const movid::MotionKind kinds[] = {movid::MotionKind::Walk,  movid::MotionKind::Jog,
                                     movid::MotionKind::Squat, movid::MotionKind::Bend,
                                     movid::MotionKind::Hop,   movid::MotionKind::Mixed};

  std::vector<movid::MultiViewSample> samples;
  samples.reserve(static_cast<size_t>(clips));
  for (int i = 0; i < clips; ++i) {
    const uint64_t ms = movid::CounterRng::key(seed, 0xDA7A, static_cast<uint64_t>(i));
    movid::MotionClip clip = movid::synth_motion(kinds[i % 6], frames, ms);
    movid::MultiViewSample s =
        movid::render_views(clip, cams, noise, movid::CounterRng::key(ms, 0xF00D));
    movid::tag_grid_indices(s, 8);
    samples.push_back(std::move(s));
  }
  movid::write_dataset(out, samples);

  std::map<int, int> per_view;
  for (const auto& s : samples)
    for (const auto& v : s.views) per_view[v.view_id] += 1;
  for (const auto& [vid, n] : per_view)
    std::printf("view %d: %d clips\n", vid, n);
  std::printf("wrote %zu samples to %s\n", samples.size(), out.c_str());

  man.outputs = {out};
  man.write(out + ".run.json");
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& data_path, const std::string& config_path,
              const std::string& ablation, const std::string& out) {
  RunManifest man;
  man.command = "train";
  man.started_at = now_iso8601();

  movid::TrainConfig cfg = movid::TrainConfig::desk();
  if (!config_path.empty()) {
    const std::string text = read_file(config_path);
    cfg = movid::parse_train_config(text);
    man.inputs.emplace_back(config_path, content_hash(text));
  }
  const std::string canon = movid::serialize_train_config(cfg);
  man.config_hash = content_hash(canon);
  man.seed = cfg.seed;

  const std::string data_text = read_file(data_path);
  man.inputs.emplace_back(data_path, content_hash(data_text));
  const auto data = movid::load_dataset(data_path);

  movid::TrainResult tr = movid::train(data, cfg, parse_ablation(ablation));

  tr.model->params.save(out, {{"config_hash", man.config_hash}, {"ablation", ablation}});
  write_file(out + ".config.ini", canon);
  write_file(out + "_history.csv", movid::history_to_csv(tr.history));

  const auto& last = tr.history.back();
  std::printf("trained %zu steps, final l_total %.6f (l_pose %.6f)\n", tr.history.size(),
              last.l_total, last.l_pose);

  man.outputs = {out + ".bin", out + ".manifest", out + ".config.ini", out + "_history.csv"};
  man.write(out + ".run.json");
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& data_path, const std::string& ckpt, const std::string& split,
             const std::string& out) {
  RunManifest man;
  man.command = "eval";
  man.started_at = now_iso8601();

  LoadedModel lm = load_checkpoint(ckpt);
  man.config_hash = content_hash(movid::serialize_train_config(lm.cfg));
  man.seed = lm.cfg.seed;

  const std::string data_text = read_file(data_path);
  man.inputs.emplace_back(data_path, content_hash(data_text));
  man.inputs.emplace_back(ckpt + ".bin", content_hash(read_file(ckpt + ".bin")));
  auto data = movid::load_dataset(data_path);

  if (split == "held" || split == "train") {
    movid::SplitResult sp = movid::split_by_azimuth(data);
    data = split == "held" ? std::move(sp.held) : std::move(sp.train);
  } else if (split != "all") {
    throw movid::InvalidArg("unknown split: " + split + " (expected all|train|held)");
  }
  if (data.empty()) throw movid::InvalidArg("split '" + split + "' selected no views");

  const movid::EvalReport rep = movid::evaluate_split(*lm.model, data, lm.cfg.eval);

  std::string csv =
      "scope,view_id,n_clips,mpjpe_mm,pa_mpjpe_mm,accel_mm,"
      "view_cluster_accuracy,cross_view_variance\n";
  int total_clips = 0;
  for (const auto& vm : rep.per_view) {
    csv += "view," + std::to_string(vm.view_id) + ',' + std::to_string(vm.n_clips) + ',' +
           movid::format_g17(vm.mpjpe_mm) + ',' + movid::format_g17(vm.pa_mpjpe_mm) + ',' +
           movid::format_g17(vm.accel_mm) + ",,\n";
    total_clips += vm.n_clips;
  }
  csv += "aggregate,-1," + std::to_string(total_clips) + ',' + movid::format_g17(rep.mpjpe_mm) +
         ',' + movid::format_g17(rep.pa_mpjpe_mm) + ',' + movid::format_g17(rep.accel_mm) + ',' +
         movid::format_g17(rep.cluster_acc) + ',' + movid::format_g17(rep.cross_view_var) + '\n';
  write_file(out, csv);

  std::printf("split=%s views=%d clips=%d\n", split.c_str(), rep.n_views, total_clips);
  std::printf("mpjpe %.3f mm, pa_mpjpe %.3f mm, accel %.4f mm/frame^2\n", rep.mpjpe_mm,
              rep.pa_mpjpe_mm, rep.accel_mm);
  std::printf("view_cluster_accuracy %.4f, cross_view_variance %.6g\n", rep.cluster_acc,
              rep.cross_view_var);

  man.outputs = {out};
  man.write(out + ".run.json");
  return 0;
}

// ---------------------------------------------------------------------------
// stream-bench
// ---------------------------------------------------------------------------

int cmd_stream_bench(const std::string& data_path, const std::string& ckpt, double theta_flip,
                     int policy_calibration, const std::string& out) {
  RunManifest man;
  man.command = "stream-bench";
  man.started_at = now_iso8601();

  LoadedModel lm = load_checkpoint(ckpt);
  man.config_hash = content_hash(movid::serialize_train_config(lm.cfg));
  man.seed = lm.cfg.seed;

  const std::string data_text = read_file(data_path);
  man.inputs.emplace_back(data_path, content_hash(data_text));
  const auto data = movid::load_dataset(data_path);

  movid::RefinementPolicy policy;
  policy.theta_flip = theta_flip;
  policy.hysteresis = lm.cfg.stream.hysteresis;
  policy.sigma = lm.cfg.stream.sigma;
  if (policy_calibration > 0) {
    movid::RefinementPolicy cal =
        movid::calibrate_prototypes(*lm.model, data, policy_calibration);
    policy.prototypes = std::move(cal.prototypes);
  }

  std::string frames_csv =
      "sample,view_id,frame,difficulty,flip_activated,encoder_passes,decoder_passes,"
      "encode_ns,viewfeat_ns,project_ns,decode_ns,flip_extra_ns,total_ns,dev_vs_batch\n";
  long n_frames = 0, n_active = 0;
  double sum_enc = 0, sum_vf = 0, sum_proj = 0, sum_dec = 0, sum_flip = 0, sum_total = 0;
  double max_dev = 0.0;

  for (size_t si = 0; si < data.size(); ++si) {
    for (const auto& vr : data[si].views) {
      movid::StreamState st(*lm.model, vr.cam.image_height, policy);
      const auto batch_ref = movid::oracle_batch(*lm.model, vr.kp, vr.cam.image_width,
                                                 vr.cam.image_height);
      for (size_t t = 0; t < vr.kp.size(); ++t) {
        const movid::FrameResult fr =
            movid::push_frame(st, vr.kp[t], vr.cam.image_width);
        double dev = 0.0;
        for (int j = 0; j < movid::kJoints; ++j) {
          const movid::Vec3 d = fr.refined.joints[j] - batch_ref[t].joints[j];
          dev = std::max({dev, std::abs(d.x), std::abs(d.y), std::abs(d.z)});
        }
        max_dev = std::max(max_dev, dev);
        n_frames += 1;
        n_active += fr.flip_activated ? 1 : 0;
        sum_enc += fr.latency_ns.encode;
        sum_vf += fr.latency_ns.viewfeat;
        sum_proj += fr.latency_ns.project;
        sum_dec += fr.latency_ns.decode;
        sum_flip += fr.latency_ns.flip_extra;
        sum_total += fr.latency_ns.total();
        frames_csv += std::to_string(si) + ',' + std::to_string(vr.view_id) + ',' +
                      std::to_string(t) + ',' + movid::format_g17(fr.difficulty) + ',' +
                      std::to_string(fr.flip_activated ? 1 : 0) + ',' +
                      std::to_string(fr.encoder_passes) + ',' +
                      std::to_string(fr.decoder_passes) + ',' +
                      std::to_string(fr.latency_ns.encode) + ',' +
                      std::to_string(fr.latency_ns.viewfeat) + ',' +
                      std::to_string(fr.latency_ns.project) + ',' +
                      std::to_string(fr.latency_ns.decode) + ',' +
                      std::to_string(fr.latency_ns.flip_extra) + ',' +
                      std::to_string(fr.latency_ns.total()) + ',' +
                      movid::format_g17(dev) + '\n';
      }
    }
  }
  if (n_frames == 0) throw movid::InvalidArg("stream-bench: dataset has no frames");

  const double inv = 1.0 / static_cast<double>(n_frames);
  std::string summary_csv =
      "frames,activation_rate,mean_encode_ns,mean_viewfeat_ns,mean_project_ns,mean_decode_ns,"
      "mean_flip_extra_ns,mean_total_ns,max_dev_vs_batch\n";
  summary_csv += std::to_string(n_frames) + ',' +
                 movid::format_g17(static_cast<double>(n_active) * inv) + ',' +
                 movid::format_g17(sum_enc * inv) + ',' + movid::format_g17(sum_vf * inv) + ',' +
                 movid::format_g17(sum_proj * inv) + ',' + movid::format_g17(sum_dec * inv) +
                 ',' + movid::format_g17(sum_flip * inv) + ',' +
                 movid::format_g17(sum_total * inv) + ',' + movid::format_g17(max_dev) + '\n';

  write_file(out + "_frames.csv", frames_csv);
  write_file(out + "_summary.csv", summary_csv);

  std::printf("frames %ld, activation rate %.4f, mean latency %.1f us, max dev %.3g\n", n_frames,
              static_cast<double>(n_active) * inv, sum_total * inv / 1000.0, max_dev);

  man.outputs = {out + "_frames.csv", out + "_summary.csv"};
  man.write(out + ".run.json");
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

int cmd_grad_check(const std::string& component, double tol, uint64_t seed,
                   const std::string& out) {
  RunManifest man;
  man.command = "grad-check";
  man.started_at = now_iso8601();
  man.seed = seed;
  man.config_hash =
      content_hash("component=" + component + ";tol=" + movid::format_g17(tol));

  movid::GradCheckOptions opt;
  opt.tol = tol;
  opt.seed = seed;

  std::vector<movid::GradCheckReport> reports;
  if (component == "all") {
    reports = movid::grad_check_all(opt);
  } else {
    reports.push_back(movid::grad_check(component, opt));
  }

  std::string csv = "component,max_rel_err,offending_param,pass,tol\n";
  bool all_pass = true;
  for (const auto& r : reports) {
    std::printf("%-16s max_rel_err %.3e at %-24s %s (tol %.1e)\n", r.component.c_str(),
                r.max_rel_err, r.offending_param.c_str(), r.pass ? "pass" : "FAIL", r.tol);
    csv += r.component + ',' + movid::format_g17(r.max_rel_err) + ',' + r.offending_param + ',' +
           (r.pass ? "1" : "0") + ',' + movid::format_g17(r.tol) + '\n';
    all_pass = all_pass && r.pass;
  }
  write_file(out, csv);
  man.outputs = {out};
  man.write(out + ".run.json");
  return all_pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"movid: view-disentangled streaming 3D pose pipeline"};
  app.require_subcommand(1);

  std::function<int()> run;

  {
    auto* c = app.add_subcommand("gen-data", "synthesize a multi-view JSONL dataset");
    auto out = std::make_shared<std::string>("dataset.jsonl");
    auto clips = std::make_shared<int>(12);
    auto views = std::make_shared<int>(16);
    auto noise_px = std::make_shared<double>(0.0);
    auto occ_prob = std::make_shared<double>(0.0);
    auto seed = std::make_shared<uint64_t>(1);
    auto frames = std::make_shared<int>(32);
    c->add_option("--out", *out, "output JSONL path");
    c->add_option("--clips", *clips, "number of motion clips")->check(CLI::PositiveNumber);
    c->add_option("--views", *views, "cameras per clip, first N of the 8x2 grid")
        ->check(CLI::Range(1, 16));
    c->add_option("--noise-px", *noise_px, "2D keypoint noise sigma in pixels")
        ->check(CLI::NonNegativeNumber);
    c->add_option("--occ-prob", *occ_prob, "per-joint occlusion probability")
        ->check(CLI::Range(0.0, 1.0));
    c->add_option("--seed", *seed, "base RNG seed");
    c->add_option("--frames", *frames, "frames per clip")->check(CLI::Range(2, 100000));
    c->callback([=, &run] {
      run = [=] {
        return cmd_gen_data(*out, *clips, *views, *noise_px, *occ_prob, *seed, *frames);
      };
    });
  }

  {
    auto* c = app.add_subcommand("train", "train a model on a JSONL dataset");
    auto data = std::make_shared<std::string>();
    auto config = std::make_shared<std::string>();
    auto ablation = std::make_shared<std::string>("none");
    auto out = std::make_shared<std::string>("model");
    c->add_option("--data", *data, "dataset JSONL")->required();
    c->add_option("--config", *config, "INI config (default: desk profile)");
    c->add_option("--ablation", *ablation, "none|no-projection|no-ortho|no-align");
    c->add_option("--out", *out, "checkpoint prefix");
    c->callback([=, &run] {
      run = [=] { return cmd_train(*data, *config, *ablation, *out); };
    });
  }

  {
    auto* c = app.add_subcommand("eval", "evaluate a checkpoint");
    auto data = std::make_shared<std::string>();
    auto ckpt = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("all");
    auto out = std::make_shared<std::string>("eval_metrics.csv");
    c->add_option("--data", *data, "dataset JSONL")->required();
    c->add_option("--checkpoint", *ckpt, "checkpoint prefix")->required();
    c->add_option("--split", *split, "all|train|held (held = odd azimuth indices)");
    c->add_option("--out", *out, "metrics CSV path");
    c->callback([=, &run] {
      run = [=] { return cmd_eval(*data, *ckpt, *split, *out); };
    });
  }

  {
    auto* c = app.add_subcommand("stream-bench", "replay 2D streams through the online engine");
    auto data = std::make_shared<std::string>();
    auto ckpt = std::make_shared<std::string>();
    auto theta = std::make_shared<double>(0.5);
    auto calib = std::make_shared<int>(4);
    auto out = std::make_shared<std::string>("stream_bench");
    c->add_option("--data", *data, "dataset JSONL")->required();
    c->add_option("--checkpoint", *ckpt, "checkpoint prefix")->required();
    c->add_option("--theta-flip", *theta, "refinement activation threshold");
    c->add_option("--policy-calibration", *calib,
                  "number of hard-view prototypes calibrated from the data (0 = none)")
        ->check(CLI::NonNegativeNumber);
    c->add_option("--out", *out, "output prefix for frames/summary CSVs");
    c->callback([=, &run] {
      run = [=] { return cmd_stream_bench(*data, *ckpt, *theta, *calib, *out); };
    });
  }

  {
    auto* c = app.add_subcommand("grad-check", "finite-difference gradient verification");
    auto component = std::make_shared<std::string>("all");
    auto tol = std::make_shared<double>(1e-5);
    auto seed = std::make_shared<uint64_t>(7);
    auto out = std::make_shared<std::string>("grad_check_report.csv");
    std::string comps = "all";
    for (const auto& n : movid::grad_check_components()) comps += "|" + n;
    c->add_option("--component", *component, comps);
    c->add_option("--tol", *tol, "relative error tolerance")->check(CLI::PositiveNumber);
    c->add_option("--seed", *seed, "RNG seed for the probe instances");
    c->add_option("--out", *out, "report CSV path");
    c->callback([=, &run] {
      run = [=] { return cmd_grad_check(*component, *tol, *seed, *out); };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    return run();
  } catch (const movid::ConfigParseError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const movid::InvalidArg& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const movid::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const movid::Error& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

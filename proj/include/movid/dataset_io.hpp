#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "movid/common.hpp"
#include "movid/geometry.hpp"

namespace movid {

constexpr int kDatasetSchemaVersion = 1;

// ---------------------------------------------------------------------------
// JSON-lines dataset: one MultiViewSample per line. Values are written with
// %.17g so parse(serialize(x)) is bit-exact; camera-frame ground truth is
// recomputed from the world frames on load rather than stored.
// ---------------------------------------------------------------------------

namespace dataset_detail {

inline void append_array(std::string& s, const double* v, int n) {
  s += '[';
  for (int i = 0; i < n; ++i) {
    if (i) s += ',';
    s += format_g17(v[i]);
  }
  s += ']';
}

}  // namespace dataset_detail

inline std::string serialize_sample(const MultiViewSample& sample) {
  using dataset_detail::append_array;
  const MotionClip& clip = sample.clip;
  std::string s;
  s.reserve(1 << 16);
  s += "{\"schema_version\":";
  s += std::to_string(kDatasetSchemaVersion);
  s += ",\"motion_id\":\"";
  s += clip.motion_id;
  s += "\",\"seed\":";
  s += std::to_string(clip.seed);
  s += ",\"noise\":{\"sigma_px\":";
  s += format_g17(sample.noise.sigma_px);
  s += ",\"p_occ\":";
  s += format_g17(sample.noise.p_occ);
  s += "},\"canon\":[";
  for (size_t t = 0; t < clip.canon.size(); ++t) {
    if (t) s += ',';
    append_array(s, clip.canon[t].angles.data(), kCanonAngles);
  }
  s += "],\"world\":[";
  std::vector<double> row(3 * kJoints);
  for (size_t t = 0; t < clip.frames.size(); ++t) {
    if (t) s += ',';
    for (int j = 0; j < kJoints; ++j) {
      row[3 * j + 0] = clip.frames[t].joints[j].x;
      row[3 * j + 1] = clip.frames[t].joints[j].y;
      row[3 * j + 2] = clip.frames[t].joints[j].z;
    }
    append_array(s, row.data(), 3 * kJoints);
  }
  s += "],\"views\":[";
  for (size_t v = 0; v < sample.views.size(); ++v) {
    const ViewRender& view = sample.views[v];
    if (v) s += ',';
    s += "{\"view_id\":";
    s += std::to_string(view.view_id);
    s += ",\"az_index\":";
    s += std::to_string(view.az_index);
    s += ",\"el_index\":";
    s += std::to_string(view.el_index);
    s += ",\"cam\":{\"azimuth\":";
    s += format_g17(view.cam.azimuth);
    s += ",\"elevation\":";
    s += format_g17(view.cam.elevation);
    s += ",\"distance\":";
    s += format_g17(view.cam.distance);
    s += ",\"focal_px\":";
    s += format_g17(view.cam.focal_px);
    s += ",\"cx\":";
    s += format_g17(view.cam.cx);
    s += ",\"cy\":";
    s += format_g17(view.cam.cy);
    s += ",\"width\":";
    s += format_g17(view.cam.image_width);
    s += ",\"height\":";
    s += format_g17(view.cam.image_height);
    s += "},\"kp\":[";
    for (size_t t = 0; t < view.kp.size(); ++t) {
      if (t) s += ',';
      for (int j = 0; j < kJoints; ++j) {
        row[3 * j + 0] = view.kp[t].u[j];
        row[3 * j + 1] = view.kp[t].v[j];
        row[3 * j + 2] = view.kp[t].confidence[j];
      }
      append_array(s, row.data(), 3 * kJoints);
    }
    s += "]}";
  }
  s += "]}";
  return s;
}

inline MultiViewSample parse_sample(const std::string& line) {
  const nlohmann::json j = nlohmann::json::parse(line);
  if (j.at("schema_version").get<int>() != kDatasetSchemaVersion)
    throw IoError("unsupported dataset schema version");

  MultiViewSample sample;
  MotionClip& clip = sample.clip;
  clip.motion_id = j.at("motion_id").get<std::string>();
  clip.seed = j.at("seed").get<uint64_t>();
  sample.noise.sigma_px = j.at("noise").at("sigma_px").get<double>();
  sample.noise.p_occ = j.at("noise").at("p_occ").get<double>();

  for (const auto& frame : j.at("canon")) {
    CanonicalPose c;
    if (frame.size() != kCanonAngles) throw IoError("canon row width");
    for (int i = 0; i < kCanonAngles; ++i) c.angles[i] = frame[i].get<double>();
    clip.canon.push_back(c);
  }
  for (const auto& frame : j.at("world")) {
    if (frame.size() != 3 * kJoints) throw IoError("world row width");
    Skeleton3D s;
    s.frame_tag = FrameTag::World;
    for (int jj = 0; jj < kJoints; ++jj)
      s.joints[jj] = {frame[3 * jj].get<double>(), frame[3 * jj + 1].get<double>(),
                      frame[3 * jj + 2].get<double>()};
    clip.frames.push_back(s);
  }
  if (clip.canon.size() != clip.frames.size()) throw IoError("canon/world length mismatch");

  for (const auto& jv : j.at("views")) {
    ViewRender view;
    view.view_id = jv.at("view_id").get<int>();
    view.az_index = jv.at("az_index").get<int>();
    view.el_index = jv.at("el_index").get<int>();
    const auto& jc = jv.at("cam");
    view.cam.azimuth = jc.at("azimuth").get<double>();
    view.cam.elevation = jc.at("elevation").get<double>();
    view.cam.distance = jc.at("distance").get<double>();
    view.cam.focal_px = jc.at("focal_px").get<double>();
    view.cam.cx = jc.at("cx").get<double>();
    view.cam.cy = jc.at("cy").get<double>();
    view.cam.image_width = jc.at("width").get<double>();
    view.cam.image_height = jc.at("height").get<double>();
    for (const auto& frame : jv.at("kp")) {
      if (frame.size() != 3 * kJoints) throw IoError("kp row width");
      Keypoints2D kp;
      for (int jj = 0; jj < kJoints; ++jj) {
        kp.u[jj] = frame[3 * jj].get<double>();
        kp.v[jj] = frame[3 * jj + 1].get<double>();
        kp.confidence[jj] = frame[3 * jj + 2].get<double>();
      }
      view.kp.push_back(kp);
    }
    view.gt_cam.reserve(clip.frames.size());
    for (const auto& w : clip.frames) view.gt_cam.push_back(world_to_camera(w, view.cam));
    sample.views.push_back(std::move(view));
  }
  return sample;
}

inline void write_dataset(const std::string& path, const std::vector<MultiViewSample>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  for (const auto& s : samples) f << serialize_sample(s) << '\n';
  if (!f) throw IoError("short write to " + path);
}

inline std::vector<MultiViewSample> load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::vector<MultiViewSample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(parse_sample(line));
  }
  return out;
}

}  // namespace movid

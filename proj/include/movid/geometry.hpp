#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "movid/common.hpp"

namespace movid {

constexpr int kJoints = 17;
constexpr int kCanonAngles = 24;

enum class FrameTag { World, Camera };

// ---------------------------------------------------------------------------
// Joint schema: COCO-17 naming. Midline joint (nose) is unpaired; the other
// sixteen form eight left/right mirror pairs.
// ---------------------------------------------------------------------------

struct JointSchema {
  std::array<const char*, kJoints> names;
  std::vector<std::pair<int, int>> lr_pairs;  // (left_index, right_index)
  int hip_L, hip_R, shoulder_L, shoulder_R;

  static const JointSchema& instance() {
    static const JointSchema s = [] {
      JointSchema js;
      js.names = {"nose",       "eye_L",      "eye_R",   "ear_L",   "ear_R",
                  "shoulder_L", "shoulder_R", "elbow_L", "elbow_R", "wrist_L",
                  "wrist_R",    "hip_L",      "hip_R",   "knee_L",  "knee_R",
                  "ankle_L",    "ankle_R"};
      js.lr_pairs = {{1, 2}, {3, 4}, {5, 6}, {7, 8}, {9, 10}, {11, 12}, {13, 14}, {15, 16}};
      js.hip_L = 11;
      js.hip_R = 12;
      js.shoulder_L = 5;
      js.shoulder_R = 6;
      return js;
    }();
    return s;
  }

  // index of the mirror partner; midline joints map to themselves
  int mirror(int j) const {
    for (const auto& [l, r] : lr_pairs) {
      if (j == l) return r;
      if (j == r) return l;
    }
    return j;
  }
};

// ---------------------------------------------------------------------------
// Core frame types
// ---------------------------------------------------------------------------

struct Skeleton3D {
  std::array<Vec3, kJoints> joints{};
  FrameTag frame_tag = FrameTag::World;

  const Vec3& hip_L() const { return joints[JointSchema::instance().hip_L]; }
  const Vec3& hip_R() const { return joints[JointSchema::instance().hip_R]; }
  const Vec3& shoulder_L() const { return joints[JointSchema::instance().shoulder_L]; }
  const Vec3& shoulder_R() const { return joints[JointSchema::instance().shoulder_R]; }

  Vec3 pelvis_center() const { return (hip_L() + hip_R()) * 0.5; }

  bool finite() const {
    for (const auto& j : joints)
      if (!j.finite()) return false;
    return true;
  }
};

struct CameraPose {
  double azimuth = 0.0;       // radians in [0, 2*pi), about the world vertical
  double elevation = 0.0;     // radians in [-pi/2, pi/2]
  double distance = 3.5;      // meters, > 0
  double focal_px = 1000.0;   // pixels, > 0
  double cx = 639.5, cy = 359.5;
  double image_width = 1280.0, image_height = 720.0;
};

struct Keypoints2D {
  std::array<double, kJoints> u{}, v{};
  std::array<double, kJoints> confidence{};  // 0 marks an occluded joint
};

struct CanonicalPose {
  // Body-frame joint angle parameters; no global rotation or translation.
  std::array<double, kCanonAngles> angles{};
  bool root_free = true;
};

struct MotionClip {
  std::vector<Skeleton3D> frames;     // world frame
  std::vector<CanonicalPose> canon;   // same length as frames
  std::string motion_id;
  uint64_t seed = 0;
};

struct NoiseSpec {
  double sigma_px = 0.0;  // zero-mean Gaussian pixel noise
  double p_occ = 0.0;     // independent per-joint drop probability
};

struct ViewRender {
  CameraPose cam;
  std::vector<Keypoints2D> kp;       // length T
  std::vector<Skeleton3D> gt_cam;    // camera-frame ground truth, length T
  int az_index = -1;                 // grid slot when rendered on a camera grid
  int el_index = -1;
  int view_id = 0;
};

struct MultiViewSample {
  MotionClip clip;
  std::vector<ViewRender> views;
  NoiseSpec noise;
};

// ---------------------------------------------------------------------------
// Rigid transforms / projection
// ---------------------------------------------------------------------------

namespace detail {

// Active rotation about +y (world vertical)
inline Vec3 rot_y(const Vec3& p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {p.x * c + p.z * s, p.y, -p.x * s + p.z * c};
}

// Active rotation about +x (camera lateral axis)
inline Vec3 rot_x(const Vec3& p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {p.x, p.y * c - p.z * s, p.y * s + p.z * c};
}

}  // namespace detail

// Rigid world->camera transform. Azimuth orbits the camera about the world
// vertical, elevation raises it above the horizontal plane, then the subject
// (assumed near the world origin) is pushed `distance` down the +z optical
// axis. Convention: p_cam = Rx(-el) * Ry(-az) * p_world + (0, 0, distance).
inline Skeleton3D world_to_camera(const Skeleton3D& s, const CameraPose& cam) {
  Skeleton3D out;
  out.frame_tag = FrameTag::Camera;
  for (int j = 0; j < kJoints; ++j) {
    Vec3 p = detail::rot_y(s.joints[j], -cam.azimuth);
    p = detail::rot_x(p, -cam.elevation);
    p.z += cam.distance;
    out.joints[j] = p;
  }
  return out;
}

// Pinhole projection of a camera-frame skeleton. All depths must be positive.
inline Keypoints2D project_perspective(const Skeleton3D& s, const CameraPose& cam) {
  Keypoints2D kp;
  for (int j = 0; j < kJoints; ++j) {
    const Vec3& p = s.joints[j];
    if (!(p.z > 0.0))
      throw NonPositiveDepth("project_perspective: joint " + std::to_string(j) +
                             " has non-positive depth");
    kp.u[j] = cam.focal_px * p.x / p.z + cam.cx;
    kp.v[j] = cam.focal_px * p.y / p.z + cam.cy;
    kp.confidence[j] = 1.0;
  }
  return kp;
}

// Left-right mirror of 2D keypoints about the image vertical midline.
// u' = width - 1 - u; left/right joint slots (and confidences) swap.
inline Keypoints2D horizontal_flip(const Keypoints2D& kp, double image_width) {
  const auto& schema = JointSchema::instance();
  Keypoints2D out;
  for (int j = 0; j < kJoints; ++j) {
    const int src = schema.mirror(j);
    out.u[j] = image_width - 1.0 - kp.u[src];
    out.v[j] = kp.v[src];
    out.confidence[j] = kp.confidence[src];
  }
  return out;
}

// 3D analogue used by flip refinement: negate camera-frame x, swap LR joints.
inline Skeleton3D mirror_skeleton_x(const Skeleton3D& s) {
  const auto& schema = JointSchema::instance();
  Skeleton3D out;
  out.frame_tag = s.frame_tag;
  for (int j = 0; j < kJoints; ++j) {
    const int src = schema.mirror(j);
    out.joints[j] = {-s.joints[src].x, s.joints[src].y, s.joints[src].z};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic motion generation
// ---------------------------------------------------------------------------

enum class MotionKind { Walk, Jog, Squat, Bend, Hop, Mixed };

inline const char* motion_kind_name(MotionKind k) {
  switch (k) {
    case MotionKind::Walk: return "walk";
    case MotionKind::Jog: return "jog";
    case MotionKind::Squat: return "squat";
    case MotionKind::Bend: return "bend";
    case MotionKind::Hop: return "hop";
    case MotionKind::Mixed: return "mixed";
  }
  return "?";
}

inline MotionKind parse_motion_kind(const std::string& s) {
  if (s == "walk") return MotionKind::Walk;
  if (s == "jog") return MotionKind::Jog;
  if (s == "squat") return MotionKind::Squat;
  if (s == "bend") return MotionKind::Bend;
  if (s == "hop") return MotionKind::Hop;
  if (s == "mixed") return MotionKind::Mixed;
  throw InvalidArg("unknown motion kind: " + s);
}

namespace canon_slot {
// Canonical angle slots. Distal slots (ankles, wrists, toes, head roll) move
// no COCO-visible segment but are still animated and carried by the anchor.
enum : int {
  SpinePitch = 0, SpineYaw = 1, SpineRoll = 2,
  NeckPitch = 3, NeckYaw = 4,
  ShoulderLPitch = 5, ShoulderLAbd = 6, ElbowL = 7,
  ShoulderRPitch = 8, ShoulderRAbd = 9, ElbowR = 10,
  HipLPitch = 11, HipLAbd = 12, KneeL = 13, AnkleL = 14,
  HipRPitch = 15, HipRAbd = 16, KneeR = 17, AnkleR = 18,
  WristL = 19, WristR = 20, ToeL = 21, ToeR = 22, HeadRoll = 23,
};
}  // namespace canon_slot

namespace detail {

// Segment lengths in meters; constant across every generated frame.
struct Body {
  double pelvis_half = 0.10;
  double spine = 0.48;
  double shoulder_half = 0.19;
  double upper_arm = 0.28;
  double forearm = 0.25;
  double thigh = 0.42;
  double shin = 0.41;
  double pelvis_height = 0.95;
};

inline Vec3 rot_z(const Vec3& p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {p.x * c - p.y * s, p.x * s + p.y * c, p.z};
}

// Forward kinematics: canonical angles -> body-frame skeleton.
// Body frame: +y up, left side at +x, subject facing -z.
inline Skeleton3D fk_body(const CanonicalPose& c, const Body& b) {
  namespace cs = canon_slot;
  const auto& a = c.angles;
  const auto& schema = JointSchema::instance();

  Skeleton3D s;
  s.frame_tag = FrameTag::World;

  auto spine_rot = [&](const Vec3& p) {
    return rot_y(rot_x(rot_z(p, a[cs::SpineRoll]), a[cs::SpinePitch]), a[cs::SpineYaw]);
  };

  const Vec3 hip_l{b.pelvis_half, 0.0, 0.0};
  const Vec3 hip_r{-b.pelvis_half, 0.0, 0.0};
  const Vec3 neck = spine_rot({0.0, b.spine, 0.0});

  s.joints[schema.hip_L] = hip_l;
  s.joints[schema.hip_R] = hip_r;
  s.joints[schema.shoulder_L] = neck + spine_rot({b.shoulder_half, 0.0, 0.0});
  s.joints[schema.shoulder_R] = neck + spine_rot({-b.shoulder_half, 0.0, 0.0});

  auto head_rot = [&](const Vec3& p) {
    return spine_rot(rot_y(rot_x(p, a[cs::NeckPitch]), a[cs::NeckYaw]));
  };
  s.joints[0] = neck + head_rot({0.0, 0.145, -0.115});   // nose
  s.joints[1] = neck + head_rot({0.033, 0.16, -0.095});  // eyes
  s.joints[2] = neck + head_rot({-0.033, 0.16, -0.095});
  s.joints[3] = neck + head_rot({0.072, 0.135, -0.015}); // ears
  s.joints[4] = neck + head_rot({-0.072, 0.135, -0.015});

  // Arms hang along -y; pitch swings about the lateral axis, abduction lifts
  // sideways, elbow flexes about the lateral axis.
  auto arm = [&](int sh_joint, int el_joint, int wr_joint, double pitch, double abd,
                 double elbow, double side) {
    auto seg_rot = [&](const Vec3& p) { return spine_rot(rot_z(rot_x(p, pitch), side * abd)); };
    const Vec3 sh = s.joints[sh_joint];
    const Vec3 el = sh + seg_rot({0.0, -b.upper_arm, 0.0});
    const Vec3 wr = el + seg_rot(rot_x({0.0, -b.forearm, 0.0}, -elbow));
    s.joints[el_joint] = el;
    s.joints[wr_joint] = wr;
  };
  arm(schema.shoulder_L, 7, 9, a[cs::ShoulderLPitch], a[cs::ShoulderLAbd], a[cs::ElbowL], 1.0);
  arm(schema.shoulder_R, 8, 10, a[cs::ShoulderRPitch], a[cs::ShoulderRAbd], a[cs::ElbowR], -1.0);

  auto leg = [&](int hip_joint, int kn_joint, int an_joint, double pitch, double abd,
                 double knee, double side) {
    auto seg_rot = [&](const Vec3& p) { return rot_z(rot_x(p, pitch), side * abd); };
    const Vec3 hp = s.joints[hip_joint];
    const Vec3 kn = hp + seg_rot({0.0, -b.thigh, 0.0});
    const Vec3 an = kn + seg_rot(rot_x({0.0, -b.shin, 0.0}, knee));
    s.joints[kn_joint] = kn;
    s.joints[an_joint] = an;
  };
  leg(schema.hip_L, 13, 15, a[cs::HipLPitch], a[cs::HipLAbd], a[cs::KneeL], 1.0);
  leg(schema.hip_R, 14, 16, a[cs::HipRPitch], a[cs::HipRAbd], a[cs::KneeR], -1.0);

  return s;
}

struct MotionParams {
  double freq_hz = 1.4;
  double hip_amp = 0.0, knee_amp = 0.0, arm_amp = 0.0, elbow_amp = 0.0;
  double squat_amp = 0.0, bend_amp = 0.0, bob_amp = 0.0;
  double speed = 0.0;     // forward m/s along world +x
  double hop_amp = 0.0;
};

inline MotionParams base_params(MotionKind kind) {
  MotionParams p;
  switch (kind) {
    case MotionKind::Walk:
      p = {1.4, 0.50, 0.38, 0.35, 0.45, 0.0, 0.0, 0.02, 1.30, 0.0};
      break;
    case MotionKind::Jog:
      p = {2.4, 0.68, 0.85, 0.55, 1.05, 0.0, 0.0, 0.045, 2.60, 0.0};
      break;
    case MotionKind::Squat:
      p = {0.55, 0.0, 0.0, 0.0, 0.25, 1.0, 0.0, 0.0, 0.0, 0.0};
      break;
    case MotionKind::Bend:
      p = {0.45, 0.0, 0.0, 0.15, 0.2, 0.0, 1.0, 0.0, 0.0, 0.0};
      break;
    case MotionKind::Hop:
      p = {2.0, 0.35, 0.55, 0.40, 0.6, 0.0, 0.0, 0.0, 0.40, 1.0};
      break;
    case MotionKind::Mixed:
      p = {1.1, 0.30, 0.25, 0.28, 0.4, 0.4, 0.35, 0.02, 0.70, 0.0};
      break;
  }
  return p;
}

}  // namespace detail

// Canonical joint angles for frame t of a motion. Pure function of
// (kind, seed, t); sinusoidal per-joint patterns at 30 fps.
inline CanonicalPose synth_canonical_frame(MotionKind kind, uint64_t seed, int t) {
  namespace cs = canon_slot;
  detail::MotionParams mp = detail::base_params(kind);

  auto wob = [&](int slot) {
    return 2.0 * CounterRng::uniform(CounterRng::key(seed, 0xA11, slot)) - 1.0;
  };
  mp.freq_hz *= 1.0 + 0.10 * wob(0);
  const double amp_scale = 1.0 + 0.12 * wob(1);
  const double phase0 = 2.0 * M_PI * CounterRng::uniform(CounterRng::key(seed, 0xA11, 2));

  const double fps = 30.0;
  const double ph = 2.0 * M_PI * mp.freq_hz * t / fps + phase0;
  const double swing = std::sin(ph);
  const double cycle = 0.5 * (1.0 - std::cos(ph));  // in [0,1]

  CanonicalPose c;
  auto& a = c.angles;

  a[cs::HipLPitch] = amp_scale * (mp.hip_amp * swing + mp.bend_amp * 0.35 * cycle +
                                  mp.squat_amp * 0.85 * cycle);
  a[cs::HipRPitch] = amp_scale * (-mp.hip_amp * swing + mp.bend_amp * 0.35 * cycle +
                                  mp.squat_amp * 0.85 * cycle);
  a[cs::KneeL] = amp_scale * (mp.knee_amp * std::max(0.0, std::sin(ph - 0.5)) +
                              mp.squat_amp * 1.45 * cycle + mp.hop_amp * 0.45 * cycle);
  a[cs::KneeR] = amp_scale * (mp.knee_amp * std::max(0.0, std::sin(ph + M_PI - 0.5)) +
                              mp.squat_amp * 1.45 * cycle + mp.hop_amp * 1.05);
  a[cs::AnkleL] = 0.15 * amp_scale * std::sin(ph + 0.3);
  a[cs::AnkleR] = 0.15 * amp_scale * std::sin(ph + M_PI + 0.3);

  a[cs::ShoulderLPitch] = amp_scale * (-mp.arm_amp * swing + mp.squat_amp * 0.8 * cycle);
  a[cs::ShoulderRPitch] = amp_scale * (mp.arm_amp * swing + mp.squat_amp * 0.8 * cycle);
  a[cs::ShoulderLAbd] = 0.08 + 0.05 * amp_scale * std::sin(ph * 0.5);
  a[cs::ShoulderRAbd] = 0.08 + 0.05 * amp_scale * std::sin(ph * 0.5 + 0.4);
  a[cs::ElbowL] = amp_scale * mp.elbow_amp * (0.55 + 0.45 * std::sin(ph + M_PI));
  a[cs::ElbowR] = amp_scale * mp.elbow_amp * (0.55 + 0.45 * std::sin(ph));
  a[cs::WristL] = 0.2 * std::sin(ph + 1.1);
  a[cs::WristR] = 0.2 * std::sin(ph + M_PI + 1.1);

  a[cs::SpinePitch] = amp_scale * (mp.bend_amp * cycle + mp.squat_amp * 0.30 * cycle +
                                   0.03 * std::sin(ph * 2.0));
  a[cs::SpineYaw] = 0.08 * amp_scale * std::sin(ph);
  a[cs::SpineRoll] = 0.04 * amp_scale * std::sin(ph + 0.8);
  a[cs::NeckPitch] = -0.4 * a[cs::SpinePitch] + 0.02 * std::sin(ph);
  a[cs::NeckYaw] = 0.05 * std::sin(ph * 0.5 + 0.2);
  a[cs::HeadRoll] = 0.03 * std::sin(ph * 0.5);
  a[cs::ToeL] = 0.1 * std::sin(ph + 0.6);
  a[cs::ToeR] = 0.1 * std::sin(ph + M_PI + 0.6);
  return c;
}

// Deterministic synthetic motion clip: canonical angles from sinusoidal
// patterns, skeleton by forward kinematics, plus a global trajectory.
// Every kind faces world +x (travelling kinds also travel along it), with a
// small seeded heading wobble. A single shared heading keeps the camera
// azimuth recoverable from the rendered view: with per-kind headings, two
// cameras 90 degrees apart would see different kinds identically and view
// clustering would be structurally impossible.
inline MotionClip synth_motion(MotionKind kind, int T, uint64_t seed) {
  if (T < 2) throw InvalidArg("synth_motion: T must be >= 2");

  const detail::Body body;
  detail::MotionParams mp = detail::base_params(kind);
  auto wob = [&](int slot) {
    return 2.0 * CounterRng::uniform(CounterRng::key(seed, 0xA11, slot)) - 1.0;
  };
  mp.freq_hz *= 1.0 + 0.10 * wob(0);
  const double amp_scale = 1.0 + 0.12 * wob(1);
  const double phase0 = 2.0 * M_PI * CounterRng::uniform(CounterRng::key(seed, 0xA11, 2));
  // Facing world +x is heading -pi/2 under the body frame convention
  // (heading 0 would face -z).
  const double heading = -M_PI / 2.0 + 0.07 * wob(3);
  const double fps = 30.0;
  const double x0 = -0.5 * mp.speed * (T - 1) / fps;
  const double z0 = 0.15 * wob(4);

  MotionClip clip;
  clip.motion_id = std::string(motion_kind_name(kind)) + "-" + std::to_string(seed);
  clip.seed = seed;
  clip.frames.reserve(T);
  clip.canon.reserve(T);

  for (int t = 0; t < T; ++t) {
    CanonicalPose c = synth_canonical_frame(kind, seed, t);
    clip.canon.push_back(c);

    Skeleton3D body_frame = detail::fk_body(c, body);

    const double ph = 2.0 * M_PI * mp.freq_hz * t / fps + phase0;
    const double cycle = 0.5 * (1.0 - std::cos(ph));
    double y = body.pelvis_height + mp.bob_amp * std::sin(2.0 * ph);
    y -= amp_scale * (0.30 * mp.squat_amp + 0.12 * mp.bend_amp) * cycle;
    if (mp.hop_amp > 0.0) y += 0.09 * std::abs(std::sin(ph));
    const Vec3 traj{x0 + mp.speed * t / fps, y, z0};

    Skeleton3D w;
    w.frame_tag = FrameTag::World;
    for (int j = 0; j < kJoints; ++j)
      w.joints[j] = detail::rot_y(body_frame.joints[j], heading) + traj;
    clip.frames.push_back(w);
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Multi-view rendering with pixel noise and confidence-zero occlusion
// ---------------------------------------------------------------------------

inline MultiViewSample render_views(const MotionClip& clip, const std::vector<CameraPose>& cams,
                                    const NoiseSpec& noise, uint64_t seed) {
  if (cams.empty()) throw InvalidArg("render_views: cams must be non-empty");

  MultiViewSample sample;
  sample.clip = clip;
  sample.noise = noise;
  sample.views.reserve(cams.size());

  const int T = static_cast<int>(clip.frames.size());
  for (size_t vi = 0; vi < cams.size(); ++vi) {
    ViewRender view;
    view.cam = cams[vi];
    view.view_id = static_cast<int>(vi);
    view.kp.reserve(T);
    view.gt_cam.reserve(T);

    for (int t = 0; t < T; ++t) {
      const Skeleton3D cam_frame = world_to_camera(clip.frames[t], cams[vi]);
      Keypoints2D kp = project_perspective(cam_frame, cams[vi]);
      for (int j = 0; j < kJoints; ++j) {
        if (noise.sigma_px > 0.0) {
          kp.u[j] += noise.sigma_px * CounterRng::gaussian(CounterRng::key(seed, vi, t, j, 0));
          kp.v[j] += noise.sigma_px * CounterRng::gaussian(CounterRng::key(seed, vi, t, j, 1));
        }
        if (noise.p_occ > 0.0 &&
            CounterRng::uniform(CounterRng::key(seed, vi, t, j, 2)) < noise.p_occ) {
          kp.confidence[j] = 0.0;
        }
      }
      view.kp.push_back(kp);
      view.gt_cam.push_back(cam_frame);
    }
    sample.views.push_back(std::move(view));
  }
  return sample;
}

// The 8-azimuth x 2-elevation benchmark grid.
inline std::vector<CameraPose> camera_grid(int n_azimuth = 8, int n_elevation = 2,
                                           double distance = 3.5) {
  std::vector<CameraPose> cams;
  const double elevations[2] = {0.17, 0.61};
  for (int e = 0; e < n_elevation; ++e) {
    for (int a = 0; a < n_azimuth; ++a) {
      CameraPose c;
      c.azimuth = 2.0 * M_PI * a / n_azimuth;
      c.elevation = elevations[e % 2];
      c.distance = distance;
      cams.push_back(c);
    }
  }
  return cams;
}

// Grid indices for camera_grid ordering.
inline void tag_grid_indices(MultiViewSample& s, int n_azimuth) {
  for (size_t v = 0; v < s.views.size(); ++v) {
    s.views[v].az_index = static_cast<int>(v) % n_azimuth;
    s.views[v].el_index = static_cast<int>(v) / n_azimuth;
  }
}

}  // namespace movid

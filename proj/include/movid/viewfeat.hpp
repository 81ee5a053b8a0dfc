#pragma once

#include <vector>

#include "movid/common.hpp"
#include "movid/geometry.hpp"

namespace movid {

constexpr int kViewFeatDim = 10;

// Geometric view descriptor read off four key joints of a camera-frame
// skeleton: the hip and shoulder width vectors plus the four key depths.
struct ViewGeomFeature {
  Vec3 v_hip{};       // k_hip_L - k_hip_R
  Vec3 v_shoulder{};  // k_shoulder_L - k_shoulder_R
  double z_hip_L = 0, z_hip_R = 0, z_shoulder_L = 0, z_shoulder_R = 0;

  // Flattening order: v_hip, v_shoulder, then the four depths.
  std::array<double, kViewFeatDim> flatten() const {
    return {v_hip.x,       v_hip.y,       v_hip.z,      v_shoulder.x, v_shoulder.y,
            v_shoulder.z,  z_hip_L,       z_hip_R,      z_shoulder_L, z_shoulder_R};
  }
};

struct ViewGeomSequence {
  std::vector<ViewGeomFeature> rows;  // F_view, one row per frame
};

// No learned parameters; depths are only view-dependent in the camera frame.
inline ViewGeomFeature extract_view_feature(const Skeleton3D& s) {
  ViewGeomFeature f;
  f.v_hip = s.hip_L() - s.hip_R();
  f.v_shoulder = s.shoulder_L() - s.shoulder_R();
  f.z_hip_L = s.hip_L().z;
  f.z_hip_R = s.hip_R().z;
  f.z_shoulder_L = s.shoulder_L().z;
  f.z_shoulder_R = s.shoulder_R().z;
  return f;
}

inline ViewGeomSequence extract_sequence(const std::vector<Skeleton3D>& k3d) {
  ViewGeomSequence seq;
  seq.rows.reserve(k3d.size());
  for (const auto& s : k3d) seq.rows.push_back(extract_view_feature(s));
  return seq;
}

}  // namespace movid

#pragma once

#include "bodysplat/core.hpp"

namespace bodysplat {

inline constexpr int kNumShapeDims = 10;
inline constexpr int kNumParts = 24;

// Canonical 24-joint skeleton order (part id = joint index + 1).
extern const char* const kPartNames[kNumParts];

// Per-part reference palette used by the synthetic trainer scenes.
extern const Scalar kPartPalette[kNumParts][3];

// Linear-blend-skinned parametric body: shape space of 10 directions over a
// template, a kinematic tree of J joints, per-vertex skin weights and part
// labels (1..24).
struct BodyModel {
  MatX template_verts;           // V x 3
  std::vector<MatX> shape_dirs;  // 10 entries, each V x 3
  MatX weights;                  // V x J, rows sum to 1
  MatX joint_regressor;          // J x V, rows sum to 1
  Eigen::VectorXi parents;       // J, parents[0] == -1, parents[j] < j
  Eigen::MatrixXi faces;         // F x 3
  std::vector<uint8_t> labels;   // V, in 1..24

  int num_vertices() const { return static_cast<int>(template_verts.rows()); }
  int num_joints() const { return static_cast<int>(parents.size()); }
  int num_faces() const { return static_cast<int>(faces.rows()); }

  void validate() const;  // throws schema_error on any broken invariant
};

struct BodyMesh {
  MatX vertices;  // V x 3, posed
  MatX joints;    // J x 3, posed
};

// Axis-angle to rotation matrix; series expansion below |theta| = 1e-8.
Mat3 rodrigues(const Vec3& axis_angle);

// Shape blend + joint regression + forward kinematics + linear blend skinning.
// beta has 10 entries, theta is J x 3 axis-angle (row 0 = root).
BodyMesh pose_body(const BodyModel& model, const VecX& beta, const MatX& theta);

inline uint8_t vertex_part(const BodyModel& model, int vertex_id) {
  return model.labels.at(static_cast<size_t>(vertex_id));
}

// Binary container (magic/version header; little-endian f32 template,
// shape_dirs, weights, regressor; i32 parents and faces; u8 labels).
void save_body_model(const std::string& path, const BodyModel& model);
BodyModel load_body_model(const std::string& path);

// Procedural desk-scale human: 24 capsule segments (3 rings of 8 + tip each)
// plus a pelvis base cap and a nose vertex; V=602, J=24.
BodyModel make_capsule_human();

// Smallest enclosing sphere proxy (bbox center + max distance).
void compute_bounding_sphere(const MatX& points, Vec3* center, Scalar* radius);

}  // namespace bodysplat

#include "bodysplat/body_model.hpp"

#include <array>
#include <cstdio>
#include <fstream>

namespace bodysplat {

const char* const kPartNames[kNumParts] = {
    "pelvis",     "l_hip",      "r_hip",   "spine1",     "l_knee",  "r_knee",
    "spine2",     "l_ankle",    "r_ankle", "spine3",     "l_foot",  "r_foot",
    "neck",       "l_collar",   "r_collar", "head",      "l_shoulder", "r_shoulder",
    "l_elbow",    "r_elbow",    "l_wrist", "r_wrist",    "l_hand",  "r_hand"};

const Scalar kPartPalette[kNumParts][3] = {
    {0.80, 0.25, 0.25}, {0.25, 0.60, 0.85}, {0.30, 0.80, 0.40}, {0.85, 0.65, 0.20},
    {0.55, 0.35, 0.75}, {0.90, 0.45, 0.60}, {0.35, 0.75, 0.70}, {0.70, 0.70, 0.30},
    {0.45, 0.45, 0.85}, {0.80, 0.50, 0.35}, {0.30, 0.55, 0.30}, {0.65, 0.30, 0.55},
    {0.25, 0.70, 0.90}, {0.75, 0.75, 0.60}, {0.50, 0.60, 0.45}, {0.90, 0.80, 0.55},
    {0.40, 0.30, 0.65}, {0.60, 0.85, 0.55}, {0.85, 0.35, 0.30}, {0.30, 0.40, 0.55},
    {0.70, 0.55, 0.80}, {0.50, 0.80, 0.75}, {0.85, 0.60, 0.45}, {0.40, 0.65, 0.60}};

void BodyModel::validate() const {
  const int V = num_vertices();
  const int J = num_joints();
  if (V < 4) throw schema_error("body model: too few vertices");
  if (J < 1 || J > kNumParts) throw schema_error("body model: joint count out of range");
  if (static_cast<int>(shape_dirs.size()) != kNumShapeDims)
    throw schema_error("body model: expected 10 shape directions");
  for (const MatX& s : shape_dirs)
    if (s.rows() != V || s.cols() != 3) throw schema_error("body model: shape_dirs shape");
  if (weights.rows() != V || weights.cols() != J)
    throw schema_error("body model: weights must be V x J");
  if (joint_regressor.rows() != J || joint_regressor.cols() != V)
    throw schema_error("body model: joint_regressor must be J x V");
  if (parents[0] != -1) throw schema_error("body model: joint 0 must be the root");
  for (int j = 1; j < J; ++j)
    if (parents[j] < 0 || parents[j] >= j)
      throw schema_error("body model: parents must be topologically ordered");
  for (int v = 0; v < V; ++v) {
    Scalar sum = 0;
    for (int j = 0; j < J; ++j) {
      if (weights(v, j) < -1e-9) throw schema_error("body model: negative skin weight");
      sum += weights(v, j);
    }
    if (std::abs(sum - 1.0) > 1e-5)
      throw schema_error("body model: skin weights of vertex " + std::to_string(v) +
                         " sum to " + std::to_string(sum));
  }
  for (int j = 0; j < J; ++j) {
    const Scalar sum = joint_regressor.row(j).sum();
    if (std::abs(sum - 1.0) > 1e-5)
      throw schema_error("body model: regressor row " + std::to_string(j) + " sums to " +
                         std::to_string(sum));
  }
  for (int f = 0; f < num_faces(); ++f)
    for (int k = 0; k < 3; ++k)
      if (faces(f, k) < 0 || faces(f, k) >= V)
        throw schema_error("body model: face index out of range");
  if (static_cast<int>(labels.size()) != V)
    throw schema_error("body model: one label per vertex required");
  for (uint8_t l : labels)
    if (l < 1 || l > kNumParts) throw schema_error("body model: labels must be in 1..24");
  if (!all_finite(template_verts.data(), template_verts.size()))
    throw schema_error("body model: non-finite template");
}

Mat3 rodrigues(const Vec3& w) {
  const Scalar theta = w.norm();
  Mat3 K;
  K << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  Scalar A, B;
  if (theta < 1e-8) {
    A = 1.0 - theta * theta / 6.0;
    B = 0.5 - theta * theta / 24.0;
  } else {
    A = std::sin(theta) / theta;
    B = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Mat3::Identity() + A * K + B * (K * K);
}

BodyMesh pose_body(const BodyModel& model, const VecX& beta, const MatX& theta) {
  const int V = model.num_vertices();
  const int J = model.num_joints();
  if (beta.size() != kNumShapeDims) throw schema_error("pose_body: beta must have 10 entries");
  if (theta.rows() != J || theta.cols() != 3)
    throw schema_error("pose_body: theta must be J x 3");
  if (!all_finite(beta.data(), beta.size()) || !all_finite(theta.data(), theta.size()))
    throw schema_error("pose_body: non-finite parameters");

  MatX shaped = model.template_verts;
  for (int k = 0; k < kNumShapeDims; ++k) shaped += beta[k] * model.shape_dirs[k];

  const MatX rest_joints = model.joint_regressor * shaped;  // J x 3

  // Forward kinematics: G_j maps the rest pose to world, pivoting each joint.
  std::vector<Mat3> G_R(J);
  std::vector<Vec3> G_t(J);
  for (int j = 0; j < J; ++j) {
    const Mat3 Rj = rodrigues(theta.row(j).transpose());
    const Vec3 jj = rest_joints.row(j).transpose();
    if (j == 0) {
      G_R[0] = Rj;
      G_t[0] = jj;
    } else {
      const int p = model.parents[j];
      const Vec3 offset = jj - rest_joints.row(p).transpose();
      G_R[j] = G_R[p] * Rj;
      G_t[j] = G_R[p] * offset + G_t[p];
    }
  }

  BodyMesh out;
  out.joints.resize(J, 3);
  std::vector<Mat3> A_R(J);
  std::vector<Vec3> A_t(J);
  for (int j = 0; j < J; ++j) {
    out.joints.row(j) = G_t[j].transpose();
    A_R[j] = G_R[j];
    A_t[j] = G_t[j] - G_R[j] * rest_joints.row(j).transpose();
  }

  out.vertices.resize(V, 3);
  for (int v = 0; v < V; ++v) {
    const Vec3 p = shaped.row(v).transpose();
    Vec3 acc = Vec3::Zero();
    for (int j = 0; j < J; ++j) {
      const Scalar wj = model.weights(v, j);
      if (wj == 0.0) continue;
      acc += wj * (A_R[j] * p + A_t[j]);
    }
    out.vertices.row(v) = acc.transpose();
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'B', 'S', 'B', 'M'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& s, const T& v) {
  s.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::istream& s, T* v) {
  s.read(reinterpret_cast<char*>(v), sizeof(T));
}

void write_f32_matrix(std::ostream& s, const MatX& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) write_pod(s, static_cast<float>(m(i, j)));
}
void read_f32_matrix(std::istream& s, MatX* m) {
  for (Eigen::Index i = 0; i < m->rows(); ++i)
    for (Eigen::Index j = 0; j < m->cols(); ++j) {
      float v;
      read_pod(s, &v);
      (*m)(i, j) = v;
    }
}

}  // namespace

void save_body_model(const std::string& path, const BodyModel& model) {
  model.validate();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open body model for writing: " + path);
  f.write(kMagic, 4);
  write_pod(f, kVersion);
  write_pod(f, static_cast<uint32_t>(model.num_vertices()));
  write_pod(f, static_cast<uint32_t>(model.num_faces()));
  write_pod(f, static_cast<uint32_t>(model.num_joints()));
  write_f32_matrix(f, model.template_verts);
  for (const MatX& s : model.shape_dirs) write_f32_matrix(f, s);
  write_f32_matrix(f, model.weights);
  write_f32_matrix(f, model.joint_regressor);
  for (int j = 0; j < model.num_joints(); ++j) write_pod(f, static_cast<int32_t>(model.parents[j]));
  for (int i = 0; i < model.num_faces(); ++i)
    for (int k = 0; k < 3; ++k) write_pod(f, static_cast<int32_t>(model.faces(i, k)));
  f.write(reinterpret_cast<const char*>(model.labels.data()), model.labels.size());
  if (!f) throw io_error("failed writing body model: " + path);
}

BodyModel load_body_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open body model: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw schema_error("body model: bad magic in " + path);
  uint32_t version, V, F, J;
  read_pod(f, &version);
  if (version != kVersion) throw schema_error("body model: unsupported version");
  read_pod(f, &V);
  read_pod(f, &F);
  read_pod(f, &J);
  if (!f || V == 0 || J == 0 || V > 10'000'000 || F > 30'000'000 || J > 64)
    throw schema_error("body model: implausible header counts");

  BodyModel m;
  m.template_verts.resize(V, 3);
  read_f32_matrix(f, &m.template_verts);
  m.shape_dirs.assign(kNumShapeDims, MatX(V, 3));
  for (MatX& s : m.shape_dirs) read_f32_matrix(f, &s);
  m.weights.resize(V, J);
  read_f32_matrix(f, &m.weights);
  m.joint_regressor.resize(J, V);
  read_f32_matrix(f, &m.joint_regressor);
  m.parents.resize(J);
  for (uint32_t j = 0; j < J; ++j) {
    int32_t p;
    read_pod(f, &p);
    m.parents[j] = p;
  }
  m.faces.resize(F, 3);
  for (uint32_t i = 0; i < F; ++i)
    for (int k = 0; k < 3; ++k) {
      int32_t v;
      read_pod(f, &v);
      m.faces(i, k) = v;
    }
  m.labels.resize(V);
  f.read(reinterpret_cast<char*>(m.labels.data()), V);
  if (!f) throw schema_error("body model: truncated file " + path);
  m.validate();
  return m;
}

namespace {

struct Segment {
  Vec3 start, end;
  Scalar radius;
};

// Rest skeleton (T-pose, y up, front toward -z). Indexed by joint.
std::array<Vec3, kNumParts> rest_joint_positions() {
  return {Vec3(0.00, 0.95, 0),      Vec3(0.09, 0.92, 0),      Vec3(-0.09, 0.92, 0),
          Vec3(0.00, 1.05, 0),      Vec3(0.10, 0.52, 0),      Vec3(-0.10, 0.52, 0),
          Vec3(0.00, 1.15, 0),      Vec3(0.11, 0.12, 0),      Vec3(-0.11, 0.12, 0),
          Vec3(0.00, 1.25, 0),      Vec3(0.11, 0.03, -0.10),  Vec3(-0.11, 0.03, -0.10),
          Vec3(0.00, 1.40, 0),      Vec3(0.06, 1.33, 0),      Vec3(-0.06, 1.33, 0),
          Vec3(0.00, 1.52, 0),      Vec3(0.20, 1.35, 0),      Vec3(-0.20, 1.35, 0),
          Vec3(0.47, 1.35, 0),      Vec3(-0.47, 1.35, 0),     Vec3(0.72, 1.35, 0),
          Vec3(-0.72, 1.35, 0),     Vec3(0.85, 1.35, 0),      Vec3(-0.85, 1.35, 0)};
}

const int kParents[kNumParts] = {-1, 0, 0,  0,  1,  2,  3,  4,  5,  6,  7,  8,
                                 9,  9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};

}  // namespace

BodyModel make_capsule_human() {
  const auto joints = rest_joint_positions();

  // Each joint owns one capsule segment running toward its child bone (or an
  // extremity for leaves).
  std::array<Segment, kNumParts> segs;
  auto seg = [&](int j, Vec3 end, Scalar r) { segs[j] = {joints[j], end, r}; };
  seg(0, joints[3], 0.110);
  seg(1, joints[4], 0.070);
  seg(2, joints[5], 0.070);
  seg(3, joints[6], 0.115);
  seg(4, joints[7], 0.055);
  seg(5, joints[8], 0.055);
  seg(6, joints[9], 0.120);
  seg(7, joints[10], 0.042);
  seg(8, joints[11], 0.042);
  seg(9, joints[12], 0.115);
  seg(10, Vec3(0.11, 0.02, -0.18), 0.035);
  seg(11, Vec3(-0.11, 0.02, -0.18), 0.035);
  seg(12, joints[15], 0.045);
  seg(13, joints[16], 0.050);
  seg(14, joints[17], 0.050);
  seg(15, Vec3(0, 1.70, 0), 0.090);
  seg(16, joints[18], 0.045);
  seg(17, joints[19], 0.045);
  seg(18, joints[20], 0.038);
  seg(19, joints[21], 0.038);
  seg(20, joints[22], 0.030);
  seg(21, joints[23], 0.030);
  seg(22, Vec3(0.93, 1.35, 0), 0.030);
  seg(23, Vec3(-0.93, 1.35, 0), 0.030);

  constexpr int kRingVerts = 8;
  constexpr int kRings = 3;
  constexpr int kVertsPerPart = kRings * kRingVerts + 1;  // + distal tip
  const int V = kNumParts * kVertsPerPart + 2;            // + pelvis base, nose

  BodyModel m;
  m.template_verts.resize(V, 3);
  m.weights = MatX::Zero(V, kNumParts);
  m.labels.assign(V, 0);
  m.parents.resize(kNumParts);
  for (int j = 0; j < kNumParts; ++j) m.parents[j] = kParents[j];

  const Scalar ring_t[kRings] = {0.0, 0.5, 0.95};
  const Scalar ring_r[kRings] = {0.85, 1.0, 0.8};

  std::vector<Eigen::Vector3i> tris;
  tris.reserve(1024);

  for (int j = 0; j < kNumParts; ++j) {
    const Segment& s = segs[j];
    const Vec3 axis = (s.end - s.start).normalized();
    Vec3 ref(0, 0, 1);
    if (std::abs(axis.dot(ref)) > 0.9) ref = Vec3(1, 0, 0);
    const Vec3 u = axis.cross(ref).normalized();
    const Vec3 v = axis.cross(u);
    const int base = j * kVertsPerPart;

    for (int r = 0; r < kRings; ++r) {
      const Vec3 center = s.start + ring_t[r] * (s.end - s.start);
      for (int k = 0; k < kRingVerts; ++k) {
        const Scalar ang = 2.0 * M_PI * k / kRingVerts;
        const Vec3 p = center + s.radius * ring_r[r] * (std::cos(ang) * u + std::sin(ang) * v);
        m.template_verts.row(base + r * kRingVerts + k) = p.transpose();
      }
    }
    m.template_verts.row(base + kRings * kRingVerts) =
        (s.end + 0.3 * s.radius * axis).transpose();

    for (int i = base; i < base + kVertsPerPart; ++i) m.labels[i] = static_cast<uint8_t>(j + 1);

    // Skin: proximal ring blends 30% into the parent joint, the rest is rigid.
    const int parent = kParents[j] >= 0 ? kParents[j] : j;
    for (int k = 0; k < kRingVerts; ++k) {
      if (kParents[j] >= 0) {
        m.weights(base + k, j) = 0.7;
        m.weights(base + k, parent) = 0.3;
      } else {
        m.weights(base + k, j) = 1.0;
      }
    }
    for (int i = base + kRingVerts; i < base + kVertsPerPart; ++i) m.weights(i, j) = 1.0;

    // Side quads between consecutive rings, then the distal fan.
    for (int r = 0; r + 1 < kRings; ++r) {
      for (int k = 0; k < kRingVerts; ++k) {
        const int k1 = (k + 1) % kRingVerts;
        const int a = base + r * kRingVerts + k;
        const int b = base + r * kRingVerts + k1;
        const int c = base + (r + 1) * kRingVerts + k;
        const int d = base + (r + 1) * kRingVerts + k1;
        tris.emplace_back(a, b, c);
        tris.emplace_back(b, d, c);
      }
    }
    const int tip = base + kRings * kRingVerts;
    for (int k = 0; k < kRingVerts; ++k) {
      const int k1 = (k + 1) % kRingVerts;
      tris.emplace_back(base + 2 * kRingVerts + k, base + 2 * kRingVerts + k1, tip);
    }
  }

  // Pelvis base cap: closes the torso's downward opening.
  const int pelvis_base = kNumParts * kVertsPerPart;
  m.template_verts.row(pelvis_base) = Vec3(0, 0.88, 0).transpose();
  m.labels[pelvis_base] = 1;
  m.weights(pelvis_base, 0) = 1.0;
  for (int k = 0; k < kRingVerts; ++k) {
    const int k1 = (k + 1) % kRingVerts;
    tris.emplace_back(k1, k, pelvis_base);  // pelvis part is part 0, ring 0 at base 0
  }

  // Nose: breaks front/back symmetry of the head.
  const int nose = pelvis_base + 1;
  const Vec3 head_mid = joints[15] + 0.5 * (segs[15].end - segs[15].start);
  m.template_verts.row(nose) = (head_mid + Vec3(0, 0.0, -0.105)).transpose();
  m.labels[nose] = 16;
  m.weights(nose, 15) = 1.0;
  {
    // Attach to the three consecutive head mid-ring vertices nearest the nose.
    const int head_base = 15 * kVertsPerPart + kRingVerts;
    int best = 0;
    Scalar bd = 1e30;
    for (int k = 0; k < kRingVerts; ++k) {
      const Scalar d =
          (m.template_verts.row(head_base + k) - m.template_verts.row(nose)).norm();
      if (d < bd) {
        best = k;
        bd = d;
      }
    }
    const int prev = (best + kRingVerts - 1) % kRingVerts;
    const int next = (best + 1) % kRingVerts;
    tris.emplace_back(head_base + prev, head_base + best, nose);
    tris.emplace_back(head_base + best, head_base + next, nose);
  }

  m.faces.resize(static_cast<int>(tris.size()), 3);
  for (size_t i = 0; i < tris.size(); ++i) m.faces.row(static_cast<int>(i)) = tris[i].transpose();

  // Joint regressor: each joint is the mean of its part's proximal ring, so
  // regressor * template reproduces the rest skeleton exactly.
  m.joint_regressor = MatX::Zero(kNumParts, V);
  for (int j = 0; j < kNumParts; ++j)
    for (int k = 0; k < kRingVerts; ++k)
      m.joint_regressor(j, j * kVertsPerPart + k) = 1.0 / kRingVerts;

  // Shape directions: bounded structured offsets (|offset| stays small for
  // beta in [-1,1]^10 so random bodies remain non-degenerate).
  const Vec3 pelvis = joints[0];
  m.shape_dirs.assign(kNumShapeDims, MatX::Zero(V, 3));
  for (int i = 0; i < V; ++i) {
    const Vec3 p = m.template_verts.row(i).transpose();
    const uint8_t part = m.labels[i];
    const bool is_arm = part >= 17 && part <= 24;
    const bool is_leg = (part >= 2 && part <= 3) || (part >= 5 && part <= 6) ||
                        (part >= 8 && part <= 9) || part == 11 || part == 12;
    const bool is_torso = part == 1 || part == 4 || part == 7 || part == 10;
    const bool is_head = part == 16 || part == 13;

    m.shape_dirs[0].row(i) = 0.06 * (p - pelvis).transpose();
    m.shape_dirs[1].row(i) = Vec3(0, 0.05 * (p.y() - pelvis.y()), 0).transpose();
    m.shape_dirs[2].row(i) = Vec3(0.04 * p.x(), 0, 0).transpose();
    const Scalar belly = std::exp(-std::pow((p.y() - 1.08) / 0.14, 2));
    if (is_torso) {
      Vec3 radial(p.x(), 0, p.z());
      if (radial.norm() > 1e-9) radial.normalize();
      m.shape_dirs[3].row(i) = (0.045 * belly * radial).transpose();
    }
    if (is_arm || is_leg) {
      const int j = part - 1;
      const Vec3 axis = (segs[j].end - segs[j].start).normalized();
      Vec3 radial = p - segs[j].start;
      radial -= radial.dot(axis) * axis;
      if (radial.norm() > 1e-9)
        m.shape_dirs[4].row(i) = (0.02 * radial.normalized()).transpose();
    }
    if (p.y() < pelvis.y())
      m.shape_dirs[5].row(i) = Vec3(0, -0.05 * (pelvis.y() - p.y()) / pelvis.y(), 0).transpose();
    if (is_arm) m.shape_dirs[6].row(i) = Vec3(0.04 * p.x(), 0, 0).transpose();
    if (is_head) {
      const Vec3 c = head_mid;
      m.shape_dirs[7].row(i) = (0.03 * (p - c)).transpose();
    }
    if (part == 14 || part == 15 || part == 17 || part == 18)
      m.shape_dirs[8].row(i) = Vec3(0.03 * p.x(), 0, 0).transpose();
    m.shape_dirs[9].row(i) =
        Vec3(0.008 * std::sin(7.0 * p.y()), 0, 0.008 * std::cos(6.0 * p.y())).transpose();
  }

  m.validate();
  return m;
}

void compute_bounding_sphere(const MatX& points, Vec3* center, Scalar* radius) {
  if (points.rows() == 0) throw schema_error("compute_bounding_sphere: empty point set");
  const Vec3 lo = points.colwise().minCoeff().transpose();
  const Vec3 hi = points.colwise().maxCoeff().transpose();
  *center = 0.5 * (lo + hi);
  Scalar r2 = 0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    r2 = std::max(r2, (points.row(i).transpose() - *center).squaredNorm());
  *radius = std::sqrt(r2);
}

}  // namespace bodysplat

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "bodysplat/body_model.hpp"

using namespace bodysplat;

TEST_CASE("capsule human has the documented shape") {
  const BodyModel m = make_capsule_human();
  CHECK(m.num_vertices() == 602);
  CHECK(m.num_faces() == 970);
  CHECK(m.num_joints() == 24);
  CHECK_NOTHROW(m.validate());
  CHECK(m.parents[0] == -1);
  for (int j = 1; j < m.num_joints(); ++j) {
    CHECK(m.parents[j] >= 0);
    CHECK(m.parents[j] < j);
  }
  std::set<uint8_t> parts(m.labels.begin(), m.labels.end());
  CHECK(parts.size() == kNumParts);  // every part owns vertices
  CHECK(*parts.begin() == 1);
  CHECK(*parts.rbegin() == kNumParts);
}

TEST_CASE("rodrigues basics") {
  CHECK((rodrigues(Vec3::Zero()) - Mat3::Identity()).cwiseAbs().maxCoeff() == 0.0);

  // quarter turn about z maps x to y
  const Mat3 Rz = rodrigues(Vec3(0, 0, M_PI / 2));
  CHECK((Rz * Vec3(1, 0, 0) - Vec3(0, 1, 0)).norm() < 1e-12);

  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Vec3 aa(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const Mat3 R = rodrigues(aa);
    CHECK((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(R.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    // rotation leaves its own axis fixed
    if (aa.norm() > 1e-6) CHECK((R * aa - aa).norm() < 1e-12 * aa.norm() + 1e-15);
  }

  // continuity across the small-angle series switch: the difference stays at
  // the scale of the angle gap itself (~2e-11), with no jump
  const Vec3 u = Vec3(1, 2, -1).normalized();
  const Mat3 lo = rodrigues(0.999e-8 * u);
  const Mat3 hi = rodrigues(1.001e-8 * u);
  CHECK((lo - hi).cwiseAbs().maxCoeff() < 5e-11);
}

TEST_CASE("rest pose reproduces the template and regressed joints") {
  const BodyModel m = make_capsule_human();
  const BodyMesh mesh = pose_body(m, VecX::Zero(kNumShapeDims), MatX::Zero(m.num_joints(), 3));
  CHECK((mesh.vertices - m.template_verts).cwiseAbs().maxCoeff() < 1e-12);
  const MatX rest_joints = m.joint_regressor * m.template_verts;
  CHECK((mesh.joints - rest_joints).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero pose applies shape directions linearly") {
  const BodyModel m = make_capsule_human();
  Rng rng(17);
  VecX beta(kNumShapeDims);
  for (int i = 0; i < kNumShapeDims; ++i) beta[i] = rng.uniform(-1, 1);
  MatX expect = m.template_verts;
  for (int k = 0; k < kNumShapeDims; ++k) expect += beta[k] * m.shape_dirs[k];
  const BodyMesh mesh = pose_body(m, beta, MatX::Zero(m.num_joints(), 3));
  CHECK((mesh.vertices - expect).cwiseAbs().maxCoeff() < 1e-12);
  // bounded: unit shape coefficients stay a small deformation
  CHECK((mesh.vertices - m.template_verts).cwiseAbs().maxCoeff() < 0.5);
}

TEST_CASE("root rotation is a rigid transform about the root joint") {
  const BodyModel m = make_capsule_human();
  MatX theta = MatX::Zero(m.num_joints(), 3);
  theta.row(0) = Vec3(0.3, -0.7, 0.2).transpose();
  const Mat3 R = rodrigues(theta.row(0).transpose());
  const Vec3 j0 = (m.joint_regressor * m.template_verts).row(0).transpose();

  const BodyMesh mesh = pose_body(m, VecX::Zero(kNumShapeDims), theta);
  for (int v = 0; v < m.num_vertices(); ++v) {
    const Vec3 p = m.template_verts.row(v).transpose();
    const Vec3 expect = R * (p - j0) + j0;
    CHECK((mesh.vertices.row(v).transpose() - expect).norm() < 1e-10);
  }
}

TEST_CASE("rotating one joint moves only its skinned subtree") {
  const BodyModel m = make_capsule_human();
  const int J = m.num_joints();
  const int pivot = J - 2;  // a distal limb joint

  std::vector<bool> in_subtree(J, false);
  in_subtree[pivot] = true;
  for (int j = pivot + 1; j < J; ++j)
    if (in_subtree[m.parents[j]]) in_subtree[j] = true;

  MatX theta = MatX::Zero(J, 3);
  theta.row(pivot) = Vec3(0.0, 0.0, 0.9).transpose();
  const BodyMesh posed = pose_body(m, VecX::Zero(kNumShapeDims), theta);

  int moved = 0, fixed = 0;
  for (int v = 0; v < m.num_vertices(); ++v) {
    Scalar subtree_weight = 0;
    for (int j = 0; j < J; ++j)
      if (in_subtree[j]) subtree_weight += m.weights(v, j);
    const Scalar shift = (posed.vertices.row(v) - m.template_verts.row(v)).norm();
    if (subtree_weight == 0.0) {
      CHECK(shift < 1e-12);
      ++fixed;
    } else if (subtree_weight == 1.0 && shift > 1e-6) {
      ++moved;
    }
  }
  CHECK(fixed > 0);
  CHECK(moved > 0);
}

TEST_CASE("body model container round trips") {
  const BodyModel m = make_capsule_human();
  const std::string path = (std::filesystem::temp_directory_path() / "bs_body.bsbm").string();
  save_body_model(path, m);
  const BodyModel r = load_body_model(path);

  CHECK(r.num_vertices() == m.num_vertices());
  CHECK(r.num_faces() == m.num_faces());
  CHECK(r.num_joints() == m.num_joints());
  CHECK((r.template_verts - m.template_verts).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((r.weights - m.weights).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((r.joint_regressor - m.joint_regressor).cwiseAbs().maxCoeff() < 1e-6);
  for (int k = 0; k < kNumShapeDims; ++k)
    CHECK((r.shape_dirs[k] - m.shape_dirs[k]).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(r.faces == m.faces);
  CHECK(r.parents == m.parents);
  CHECK(r.labels == m.labels);

  // reloading the stored f32 data is lossless
  const std::string path2 = (std::filesystem::temp_directory_path() / "bs_body2.bsbm").string();
  save_body_model(path2, r);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("body model load rejects malformed files") {
  CHECK_THROWS_AS(load_body_model("/nonexistent.bsbm"), io_error);

  const std::string bad = (std::filesystem::temp_directory_path() / "bs_badbody.bsbm").string();
  {
    std::ofstream f(bad, std::ios::binary);
    f << "NOPE this is not a body model";
  }
  CHECK_THROWS_AS(load_body_model(bad), schema_error);

  // truncation after the header
  const BodyModel m = make_capsule_human();
  const std::string full = (std::filesystem::temp_directory_path() / "bs_trunc.bsbm").string();
  save_body_model(full, m);
  {
    std::ifstream in(full, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(bad, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_body_model(bad), schema_error);
  std::filesystem::remove(bad);
  std::filesystem::remove(full);
}

TEST_CASE("pose_body rejects malformed parameters") {
  const BodyModel m = make_capsule_human();
  CHECK_THROWS_AS(pose_body(m, VecX::Zero(3), MatX::Zero(m.num_joints(), 3)), schema_error);
  CHECK_THROWS_AS(pose_body(m, VecX::Zero(kNumShapeDims), MatX::Zero(5, 3)), schema_error);
  VecX nan_beta = VecX::Zero(kNumShapeDims);
  nan_beta[0] = std::numeric_limits<Scalar>::quiet_NaN();
  CHECK_THROWS_AS(pose_body(m, nan_beta, MatX::Zero(m.num_joints(), 3)), schema_error);
}

TEST_CASE("validate catches broken invariants") {
  BodyModel m = make_capsule_human();
  m.parents[0] = 0;
  CHECK_THROWS_AS(m.validate(), schema_error);

  m = make_capsule_human();
  m.weights(0, 0) += 0.5;
  CHECK_THROWS_AS(m.validate(), schema_error);

  m = make_capsule_human();
  m.labels[10] = 0;
  CHECK_THROWS_AS(m.validate(), schema_error);

  m = make_capsule_human();
  m.faces(0, 0) = 100000;
  CHECK_THROWS_AS(m.validate(), schema_error);
}

TEST_CASE("bounding sphere encloses all points") {
  Rng rng(8);
  MatX pts(50, 3);
  for (int i = 0; i < pts.size(); ++i) pts(i) = rng.uniform(-3, 3);
  Vec3 center;
  Scalar radius;
  compute_bounding_sphere(pts, &center, &radius);
  Scalar max_d = 0;
  for (int i = 0; i < pts.rows(); ++i)
    max_d = std::max(max_d, (pts.row(i).transpose() - center).norm());
  CHECK(max_d <= radius + 1e-12);
  CHECK(radius <= max_d + 1e-12);  // tight: radius equals the farthest point
}

TEST_CASE("head joint owns the head part label") {
  const BodyModel m = make_capsule_human();
  // part ids are joint index + 1; the head joint is index 15
  bool head_vertices = false;
  for (int v = 0; v < m.num_vertices(); ++v) {
    if (m.labels[v] == 16) {
      head_vertices = true;
      // head vertices are skinned dominantly to the head joint
      CHECK(m.weights(v, 15) > 0.5);
    }
  }
  CHECK(head_vertices);
}

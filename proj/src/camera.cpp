#include "dvne/camera.hpp"

#include "dvne/errors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>

namespace dvne {

void Camera::validate() const {
    if (width < 1 || height < 1) throw InvalidArgument("camera image size must be positive");
    if (!(intrinsics(0, 0) > 0.0) || !(intrinsics(1, 1) > 0.0)) throw InvalidArgument("camera focal lengths must be positive");
    const Mat3 r = camera_to_world.block<3, 3>(0, 0);
    if (!(r.transpose() * r).isIdentity(1e-6)) throw InvalidArgument("camera rotation is not orthonormal");
}

Ray Camera::pixel_ray(double x, double y) const {
    const Mat3 k_inv = intrinsics.inverse();
    const Mat3 r = camera_to_world.block<3, 3>(0, 0);
    const Vec3 d0 = r * (k_inv * Vec3(x + 0.5, y + 0.5, 1.0));
    const Vec3 d1 = r * (k_inv * Vec3(x + 1.5, y + 0.5, 1.0));
    const Vec3 n0 = d0.normalized();
    // Cone radius per unit distance: pixel footprint scaled to match the
    // variance of a uniform pixel (2 / sqrt(12)).
    const double radius = (d1.normalized() - n0).norm() * 2.0 / std::sqrt(12.0);
    return Ray::make(center(), n0, radius > 0.0 ? radius : 1e-9);
}

Camera Camera::resized(int new_width, int new_height) const {
    if (new_width < 1 || new_height < 1) throw InvalidArgument("resized camera needs a positive size");
    Camera c = *this;
    const double sx = static_cast<double>(new_width) / width;
    const double sy = static_cast<double>(new_height) / height;
    c.intrinsics.row(0) *= sx;
    c.intrinsics.row(1) *= sy;
    c.width = new_width;
    c.height = new_height;
    return c;
}

bool Camera::project(const Vec3& p, double& u, double& v) const {
    const Mat3 r = camera_to_world.block<3, 3>(0, 0);
    const Vec3 pc = r.transpose() * (p - center());
    if (pc.z() <= 0.0) return false;
    const Vec3 h = intrinsics * (pc / pc.z());
    u = h.x();
    v = h.y();
    return true;
}

Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double vertical_fov_deg, int width, int height,
               int frame_index) {
    const Vec3 fwd = (target - eye).normalized();
    Vec3 right = fwd.cross(up);
    if (right.norm() < 1e-9) right = fwd.cross(Vec3::UnitZ());
    right.normalize();
    const Vec3 down = fwd.cross(right);
    Camera c;
    c.width = width;
    c.height = height;
    c.frame_index = frame_index;
    const double f = 0.5 * height / std::tan(0.5 * vertical_fov_deg * std::numbers::pi / 180.0);
    c.intrinsics << f, 0, 0.5 * width, 0, f, 0.5 * height, 0, 0, 1;
    c.camera_to_world.setIdentity();
    c.camera_to_world.block<3, 1>(0, 0) = right;
    c.camera_to_world.block<3, 1>(0, 1) = down;
    c.camera_to_world.block<3, 1>(0, 2) = fwd;
    c.camera_to_world.block<3, 1>(0, 3) = eye;
    return c;
}

void write_camera_json(const std::filesystem::path& path, const Camera& camera) {
    nlohmann::json j;
    j["intrinsics"] = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) j["intrinsics"].push_back({camera.intrinsics(r, 0), camera.intrinsics(r, 1), camera.intrinsics(r, 2)});
    j["camera_to_world"] = nlohmann::json::array();
    for (int r = 0; r < 4; ++r) {
        j["camera_to_world"].push_back({camera.camera_to_world(r, 0), camera.camera_to_world(r, 1),
                                        camera.camera_to_world(r, 2), camera.camera_to_world(r, 3)});
    }
    j["width"] = camera.width;
    j["height"] = camera.height;
    j["frame_index"] = camera.frame_index;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    // Full precision so records round-trip bit-exactly.
    out << j.dump(1) << '\n';
}

Camera read_camera_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open camera file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
        Camera c;
        const auto& k = j.at("intrinsics");
        const auto& m = j.at("camera_to_world");
        if (k.size() != 3 || m.size() != 4) throw IngestionError(path.string() + ": bad matrix shape");
        for (int r = 0; r < 3; ++r) {
            if (k[r].size() != 3) throw IngestionError(path.string() + ": intrinsics rows need 3 entries");
            for (int cc = 0; cc < 3; ++cc) c.intrinsics(r, cc) = k[r][cc].get<double>();
        }
        for (int r = 0; r < 4; ++r) {
            if (m[r].size() != 4) throw IngestionError(path.string() + ": camera_to_world rows need 4 entries");
            for (int cc = 0; cc < 4; ++cc) c.camera_to_world(r, cc) = m[r][cc].get<double>();
        }
        c.width = j.at("width").get<int>();
        c.height = j.at("height").get<int>();
        c.frame_index = j.value("frame_index", 0);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError(path.string() + ": " + e.what());
    } catch (const InvalidArgument& e) {
        throw IngestionError(path.string() + ": " + e.what());
    }
}

}  // namespace dvne

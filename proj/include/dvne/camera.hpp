#pragma once

#include "dvne/geometry.hpp"

#include <filesystem>

namespace dvne {

// Pinhole camera with OpenCV axes (x right, y down, z forward).
struct Camera {
    Mat3 intrinsics = Mat3::Identity();
    Mat4 camera_to_world = Mat4::Identity();
    int width = 1;
    int height = 1;
    int frame_index = 0;

    Vec3 center() const { return camera_to_world.block<3, 1>(0, 3); }
    Vec3 forward() const { return camera_to_world.block<3, 1>(0, 2).normalized(); }
    void validate() const;

    // Ray through the center of pixel (x, y).
    Ray pixel_ray(double x, double y) const;
    // Same camera with the image resized; intrinsics scale accordingly.
    Camera resized(int new_width, int new_height) const;
    // Projects a world point to pixel coordinates; returns false if behind.
    bool project(const Vec3& p, double& u, double& v) const;
};

// Camera at `eye` looking at `target`; `up` is the world up direction.
Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double vertical_fov_deg, int width, int height,
               int frame_index = 0);

// JSON: "intrinsics" (3x3), "camera_to_world" (4x4), "width", "height", "frame_index".
void write_camera_json(const std::filesystem::path& path, const Camera& camera);
Camera read_camera_json(const std::filesystem::path& path);

}  // namespace dvne

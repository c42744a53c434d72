#pragma once

#include <string>

#include "m2m/warp.hpp"

namespace m2m {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Middlebury .flo: float magic 202021.25, i32 width/height, interleaved (u,v)
// f32 pairs row-major. All fields little-endian regardless of host.
FlowField<float> read_flo(const std::string& path);
void write_flo(const std::string& path, const FlowField<float>& f);

// Images are [3,H,W] in [0,1]. Readers: binary PPM (P6) and 8-bit RGB PNG,
// chosen by content; writers pick the format from the file extension.
Tensor<float> read_image(const std::string& path);
void write_image(const std::string& path, const Tensor<float>& img);

// Middlebury color-wheel visualization; zero flow maps to white. max_mag <= 0
// means normalize by the field's own maximum magnitude.
Tensor<float> flow_to_color(const FlowField<float>& f, float max_mag = 0.0f);

}  // namespace m2m

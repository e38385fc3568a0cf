#pragma once

// Image tensors are float32, channels-first [C, H, W], values in [0, 1].
// Masks are [1, H, W] with values in {0, 1} unless stated otherwise.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace cv {
class Mat;
}

namespace wmr::image {

enum class ResampleFilter { bilinear, bicubic };

/// 8-bit quantization on the 1/255 grid (round half away from zero).
torch::Tensor quantize8(const torch::Tensor& img);

cv::Mat to_mat8(const torch::Tensor& img);
torch::Tensor from_mat8(const cv::Mat& mat);

/// Loads an image as RGB [3,H,W] (or [1,H,W] when `channels == 1`).
/// Returns nullopt when OpenCV cannot decode the file.
std::optional<torch::Tensor> read(const std::filesystem::path& path, int channels = 3);

/// Loads an RGBA image as [4,H,W]. Files without an alpha channel get
/// an alpha derived from luminance.
std::optional<torch::Tensor> read_rgba(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const torch::Tensor& img);
std::vector<std::uint8_t> encode_png(const torch::Tensor& img);
/// Decodes PNG (or anything OpenCV understands) bytes. Throws InputError.
torch::Tensor decode(const std::vector<std::uint8_t>& bytes, int channels);

/// Standard JPEG encode/decode at the given quality.
torch::Tensor jpeg_roundtrip(const torch::Tensor& img, int quality);

/// Downscale by `scale` with `filter`, then upscale back to the original size.
torch::Tensor resample_roundtrip(const torch::Tensor& img, double scale, ResampleFilter filter);

/// Size used by the downscale step of resample_roundtrip.
std::int64_t scaled_extent(std::int64_t extent, double scale);

/// Nearest-neighbour resize for masks, followed by a 0.5 threshold.
torch::Tensor resize_mask(const torch::Tensor& mask, std::int64_t height, std::int64_t width);

}  // namespace wmr::image

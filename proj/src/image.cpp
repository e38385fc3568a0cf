#include "wmr/image.hpp"

#include "wmr/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>

namespace wmr::image {

namespace {

void check_image(const torch::Tensor& img) {
  if (!img.defined() || img.dim() != 3 || (img.size(0) != 1 && img.size(0) != 3 && img.size(0) != 4)) {
    throw InputError("expected an image tensor shaped [C,H,W] with C in {1,3,4}");
  }
}

int interpolation(ResampleFilter filter) {
  return filter == ResampleFilter::bicubic ? cv::INTER_CUBIC : cv::INTER_LINEAR;
}

}  // namespace

torch::Tensor quantize8(const torch::Tensor& img) {
  return torch::floor(img.clamp(0.0, 1.0) * 255.0 + 0.5) / 255.0;
}

cv::Mat to_mat8(const torch::Tensor& img) {
  check_image(img);
  const auto channels = img.size(0);
  auto bytes = torch::floor(img.detach().to(torch::kFloat).clamp(0.0, 1.0) * 255.0 + 0.5)
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  const int rows = static_cast<int>(img.size(1));
  const int cols = static_cast<int>(img.size(2));
  cv::Mat rgb(rows, cols, CV_8UC(static_cast<int>(channels)), bytes.data_ptr<std::uint8_t>());
  cv::Mat out;
  if (channels == 3) {
    cv::cvtColor(rgb, out, cv::COLOR_RGB2BGR);
  } else if (channels == 4) {
    cv::cvtColor(rgb, out, cv::COLOR_RGBA2BGRA);
  } else {
    out = rgb.clone();
  }
  return out;
}

torch::Tensor from_mat8(const cv::Mat& mat) {
  if (mat.empty() || mat.depth() != CV_8U) {
    throw InputError("expected a non-empty 8-bit image");
  }
  cv::Mat rgb;
  switch (mat.channels()) {
    case 1: rgb = mat; break;
    case 3: cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(mat, rgb, cv::COLOR_BGRA2RGBA); break;
    default: throw InputError("unsupported channel count " + std::to_string(mat.channels()));
  }
  if (!rgb.isContinuous()) {
    rgb = rgb.clone();
  }
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, rgb.channels()}, torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat).div(255.0).contiguous();
}

std::optional<torch::Tensor> read(const std::filesystem::path& path, int channels) {
  cv::Mat mat = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (mat.empty()) {
    return std::nullopt;
  }
  return from_mat8(mat);
}

std::optional<torch::Tensor> read_rgba(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) {
    return std::nullopt;
  }
  if (mat.depth() != CV_8U) {
    mat.convertTo(mat, CV_8U, 1.0 / 257.0);
  }
  auto t = from_mat8(mat);
  if (t.size(0) == 4) {
    return t;
  }
  if (t.size(0) == 1) {
    // Grey logo: white ink, opacity from intensity.
    return torch::cat({torch::ones({3, t.size(1), t.size(2)}), t}, 0);
  }
  auto luminance = (0.299 * t[0] + 0.587 * t[1] + 0.114 * t[2]).unsqueeze(0);
  return torch::cat({t, luminance}, 0);
}

std::vector<std::uint8_t> encode_png(const torch::Tensor& img) {
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", to_mat8(img), buf, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw RuntimeFailure("PNG encoding failed");
  }
  return buf;
}

void write_png(const std::filesystem::path& path, const torch::Tensor& img) {
  if (!cv::imwrite(path.string(), to_mat8(img), {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw RuntimeFailure("cannot write " + path.string());
  }
}

torch::Tensor decode(const std::vector<std::uint8_t>& bytes, int channels) {
  if (bytes.empty()) {
    throw InputError("empty image payload");
  }
  cv::Mat mat = cv::imdecode(bytes, channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (mat.empty()) {
    throw InputError("undecodable image payload");
  }
  return from_mat8(mat);
}

torch::Tensor jpeg_roundtrip(const torch::Tensor& img, int quality) {
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".jpg", to_mat8(img), buf, {cv::IMWRITE_JPEG_QUALITY, quality})) {
    throw RuntimeFailure("JPEG encoding failed");
  }
  return from_mat8(cv::imdecode(buf, img.size(0) == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR));
}

std::int64_t scaled_extent(std::int64_t extent, double scale) {
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(static_cast<double>(extent) * scale)));
}

torch::Tensor resample_roundtrip(const torch::Tensor& img, double scale, ResampleFilter filter) {
  cv::Mat src = to_mat8(img);
  cv::Mat small;
  cv::Mat back;
  const int w = static_cast<int>(scaled_extent(img.size(2), scale));
  const int h = static_cast<int>(scaled_extent(img.size(1), scale));
  cv::resize(src, small, cv::Size(w, h), 0, 0, interpolation(filter));
  cv::resize(small, back, src.size(), 0, 0, interpolation(filter));
  return from_mat8(back);
}

torch::Tensor resize_mask(const torch::Tensor& mask, std::int64_t height, std::int64_t width) {
  if (mask.size(1) == height && mask.size(2) == width) {
    return (mask >= 0.5).to(torch::kFloat);
  }
  auto m = torch::nn::functional::interpolate(
      mask.unsqueeze(0).to(torch::kFloat),
      torch::nn::functional::InterpolateFuncOptions()
          .size(std::vector<int64_t>{height, width})
          .mode(torch::kNearest));
  return (m.squeeze(0) >= 0.5).to(torch::kFloat);
}

}  // namespace wmr::image

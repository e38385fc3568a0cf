#pragma once

// JSON-over-HTTP inference endpoint.
//
//   POST /v1/remove   {"image": <base64 PNG>,
//                      "mask": <base64 PNG>,             optional
//                      "polygons": [[[x, y], ...], ...], optional
//                      "mask_dilate": <radius>,          optional, default 0
//                      "options": {"return_cbkg": bool, "blind": bool}}
//                  -> {"image": <base64 PNG>, "cbkg": <base64 PNG>?, "model_id",
//                      "config_hash", "width", "height"}
//   GET  /v1/health -> {"status": "ready" | "degraded", "model_id", "config_hash",
//                       "uptime_s", "detail"?}
//
// Inference time is reported in the X-Inference-Ms header so that identical
// requests produce identical bodies.

#include "wmr/model.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace wmr::service {

inline constexpr std::size_t kDefaultMaxBody = 16u << 20;
inline constexpr int kMaxDilation = 64;

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t max_body = kDefaultMaxBody;
  /// Simultaneous forward passes; further requests wait in FIFO order.
  int workers = 2;
};

struct Response {
  int status = 200;
  std::string body;
  double timing_ms = 0;
};

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
/// Throws InputError on characters outside the standard alphabet or bad padding.
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Even-odd fill of all polygons together, sampled at pixel centres.
/// Returns a [1,H,W] binary mask.
torch::Tensor rasterize_polygons(const nlohmann::json& polygons, std::int64_t height, std::int64_t width);

class Service {
 public:
  /// `model` may be empty: the service then answers health as degraded and
  /// removal with 503.
  Service(std::optional<LoadedModel> model, ServiceConfig cfg, std::string detail = {});
  ~Service();

  /// Loads the checkpoint if given; a failed load yields a degraded service.
  static std::unique_ptr<Service> from_checkpoint(const std::optional<std::filesystem::path>& dir, ServiceConfig cfg);

  bool ready() const { return model_.has_value(); }
  const ServiceConfig& config() const { return cfg_; }

  Response handle_remove(const std::string& body) const;
  Response handle_health() const;

  /// Blocks serving HTTP until stop() is called. Returns false if the socket
  /// could not be bound.
  bool listen();
  /// Binds to an ephemeral port and returns it (0 on failure); serve with
  /// listen_after_bind().
  int bind_any_port();
  bool listen_after_bind();
  void stop();

 private:
  void install_routes();

  std::optional<LoadedModel> model_;
  ServiceConfig cfg_;
  std::string detail_;
  std::chrono::steady_clock::time_point started_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace wmr::service

#include "wmr/service.hpp"

#include "wmr/errors.hpp"
#include "wmr/image.hpp"
#include "wmr/synth.hpp"

#include <httplib.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <iostream>

namespace wmr::service {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::array<int, 256> decode_table() {
  std::array<int, 256> t{};
  t.fill(-1);
  for (int i = 0; i < 64; ++i) t[static_cast<unsigned char>(kAlphabet[i])] = i;
  return t;
}

Response error(int status, const std::string& message) {
  return {status, nlohmann::json{{"error", message}}.dump(), 0};
}

torch::Tensor decode_field(const nlohmann::json& req, const char* field, int channels) {
  if (!req.at(field).is_string()) throw InputError(std::string("'") + field + "' must be a base64 string");
  return image::decode(base64_decode(req.at(field).get<std::string>()), channels);
}

}  // namespace

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  static const auto table = decode_table();
  if (text.size() % 4 != 0) throw InputError("base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=') {
        if (i + 4 != text.size() || k < 2) throw InputError("misplaced base64 padding");
        v[k] = 0;
        ++pad;
      } else {
        if (pad > 0) throw InputError("misplaced base64 padding");
        v[k] = table[static_cast<unsigned char>(c)];
        if (v[k] < 0) throw InputError("invalid base64 character");
      }
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xff));
  }
  return out;
}

torch::Tensor rasterize_polygons(const nlohmann::json& polygons, std::int64_t height, std::int64_t width) {
  if (!polygons.is_array()) throw InputError("'polygons' must be an array of polygons");
  std::vector<std::vector<std::pair<double, double>>> polys;
  for (const auto& poly : polygons) {
    if (!poly.is_array() || poly.size() < 3) throw InputError("each polygon needs at least 3 vertices");
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : poly) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
        throw InputError("polygon vertices must be [x, y] number pairs");
      }
      pts.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
    polys.push_back(std::move(pts));
  }
  auto mask = torch::zeros({1, height, width}, torch::kFloat);
  auto acc = mask.accessor<float, 3>();
  for (std::int64_t y = 0; y < height; ++y) {
    const double py = static_cast<double>(y) + 0.5;
    for (std::int64_t x = 0; x < width; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      bool inside = false;
      for (const auto& pts : polys) {
        for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
          const auto [xi, yi] = pts[i];
          const auto [xj, yj] = pts[j];
          if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
        }
      }
      acc[0][y][x] = inside ? 1.0f : 0.0f;
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------

Service::Service(std::optional<LoadedModel> model, ServiceConfig cfg, std::string detail)
    : model_(std::move(model)), cfg_(std::move(cfg)), detail_(std::move(detail)),
      started_(std::chrono::steady_clock::now()) {}

Service::~Service() = default;

std::unique_ptr<Service> Service::from_checkpoint(const std::optional<std::filesystem::path>& dir, ServiceConfig cfg) {
  if (!dir) return std::make_unique<Service>(std::nullopt, std::move(cfg), "no checkpoint configured");
  try {
    return std::make_unique<Service>(load_model(*dir), std::move(cfg));
  } catch (const std::exception& e) {
    return std::make_unique<Service>(std::nullopt, std::move(cfg), e.what());
  }
}

Response Service::handle_remove(const std::string& body) const {
  if (body.size() > cfg_.max_body) {
    return error(413, "payload of " + std::to_string(body.size()) + " bytes exceeds the limit of " +
                          std::to_string(cfg_.max_body));
  }
  if (!model_) return error(503, "no model loaded" + (detail_.empty() ? std::string() : ": " + detail_));
  try {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      throw InputError("request body is not valid JSON");
    }
    if (!req.is_object() || !req.contains("image")) throw InputError("request needs an 'image' field");
    auto img = decode_field(req, "image", 3);
    const auto h = img.size(1);
    const auto w = img.size(2);

    const auto opts = req.value("options", nlohmann::json::object());
    if (!opts.is_object()) throw InputError("'options' must be an object");
    const bool blind = opts.value("blind", false);
    const bool want_cbkg = opts.value("return_cbkg", false);

    torch::Tensor mask;
    if (blind) {
      mask = torch::ones({1, h, w});
    } else if (req.contains("mask") && !req.at("mask").is_null()) {
      mask = image::resize_mask(decode_field(req, "mask", 1), h, w);
    } else if (req.contains("polygons")) {
      mask = rasterize_polygons(req.at("polygons"), h, w);
    } else {
      throw InputError("request needs 'mask' or 'polygons' unless options.blind is set");
    }
    const int dilate = req.value("mask_dilate", 0);
    if (dilate < 0 || dilate > kMaxDilation) {
      throw InputError("mask_dilate must lie in [0, " + std::to_string(kMaxDilation) + "]");
    }
    if (dilate > 0) mask = synth::morph(mask, synth::MorphOp::dilate, dilate);

    const auto t0 = std::chrono::steady_clock::now();
    auto model = model_->model;
    auto result = remove_watermark(model, img, mask);
    const auto t1 = std::chrono::steady_clock::now();

    nlohmann::json resp = {{"image", base64_encode(image::encode_png(result.y))},
                           {"model_id", model_->card.model_id},
                           {"config_hash", model_->card.config_hash},
                           {"width", w},
                           {"height", h}};
    if (want_cbkg && result.c_bkg.defined()) resp["cbkg"] = base64_encode(image::encode_png(result.c_bkg));
    return {200, resp.dump(), std::chrono::duration<double, std::milli>(t1 - t0).count()};
  } catch (const InputError& e) {
    return error(400, e.what());
  } catch (const nlohmann::json::exception& e) {
    return error(400, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

Response Service::handle_health() const {
  const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  nlohmann::json j = {{"status", ready() ? "ready" : "degraded"}, {"uptime_s", uptime}};
  if (model_) {
    j["model_id"] = model_->card.model_id;
    j["config_hash"] = model_->card.config_hash;
  } else {
    j["model_id"] = nullptr;
    j["config_hash"] = nullptr;
    j["detail"] = detail_;
  }
  return {200, j.dump(), 0};
}

void Service::install_routes() {
  server_ = std::make_unique<httplib::Server>();
  const int workers = std::max(1, cfg_.workers);
  server_->new_task_queue = [workers] { return new httplib::ThreadPool(static_cast<std::size_t>(workers)); };
  // Leave headroom so oversized bodies reach handle_remove and get a JSON 413.
  server_->set_payload_max_length(cfg_.max_body + 1);
  server_->Post("/v1/remove", [this](const httplib::Request& req, httplib::Response& res) {
    auto r = handle_remove(req.body);
    res.status = r.status;
    char ms[32];
    std::snprintf(ms, sizeof ms, "%.3f", r.timing_ms);
    res.set_header("X-Inference-Ms", ms);
    res.set_content(r.body, "application/json");
  });
  server_->Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    auto r = handle_health();
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
}

bool Service::listen() {
  install_routes();
  return server_->listen(cfg_.host, cfg_.port);
}

int Service::bind_any_port() {
  install_routes();
  const int port = server_->bind_to_any_port(cfg_.host);
  return port < 0 ? 0 : port;
}

bool Service::listen_after_bind() { return server_ && server_->listen_after_bind(); }

void Service::stop() {
  if (server_) server_->stop();
}

}  // namespace wmr::service

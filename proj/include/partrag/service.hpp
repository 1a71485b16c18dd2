#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>

#include "partrag/pipeline.hpp"

namespace partrag {

struct ServiceOptions {
  /// Extra time an edit holds its asset lock; lets tests force overlap.
  std::chrono::milliseconds edit_hold{0};
};

/// HTTP/JSON API under /v1. Assets live in `<workspace>/assets/<id>/record.json`
/// as a base state plus an ordered edit history; the current state is the
/// replay of that history.
class Service {
 public:
  /// Loads models from the workspace; when that fails the service still
  /// starts and model-backed endpoints answer 503.
  Service(RunConfig cfg, Workspace ws, ServiceOptions opt = {});
  Service(RunConfig cfg, Workspace ws, std::optional<Models> models, ServiceOptions opt = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds (port 0 picks a free one) and serves on a background thread.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Blocks until stop() is called.
  void wait();
  void stop();
  bool models_loaded() const;
  /// Blocks until no generate job is queued or running.
  void drain();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace partrag

#pragma once

// Runs a Service on an ephemeral loopback port with a throwaway store.

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <thread>

#include "cap/service.hpp"
#include "httplib.h"

namespace cap::testing {

class LiveService {
 public:
  explicit LiveService(service::Config config = {},
                       std::shared_ptr<agents::ChatClient> client = nullptr) {
    std::random_device rd;
    root_ = std::filesystem::temp_directory_path() /
            ("cap_service_" + std::to_string(rd()) + std::to_string(rd()));
    config.host = "127.0.0.1";
    config.store_root = root_.string();
    svc_ = std::make_unique<service::Service>(config, std::move(client));
    port_ = svc_->bind_any_port();
    thread_ = std::thread([this] { svc_->serve(); });
    while (!svc_->running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }

  ~LiveService() {
    svc_->stop();
    thread_.join();
    svc_.reset();
    std::filesystem::remove_all(root_);
  }

  service::Service& svc() { return *svc_; }
  int port() const { return port_; }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(30, 0);
    return c;
  }

 private:
  std::filesystem::path root_;
  std::unique_ptr<service::Service> svc_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace cap::testing

#pragma once

#include <chrono>
#include <iostream>
#include <mutex>
#include <string>

#include "json.hpp"

namespace oaid {

// Line-delimited JSON events. A default-constructed log discards everything.
class EventLog {
public:
  EventLog() = default;
  explicit EventLog(std::ostream& out, bool timestamps = true) : out_(&out), timestamps_(timestamps) {}

  void emit(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    if (!out_) return;
    nlohmann::json line{{"event", event}};
    if (timestamps_) {
      const auto now = std::chrono::system_clock::now().time_since_epoch();
      line["ts_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    }
    line.update(fields);
    std::lock_guard lock(mutex_);
    *out_ << line.dump() << '\n' << std::flush;
  }

private:
  std::ostream* out_ = nullptr;
  bool timestamps_ = true;
  mutable std::mutex mutex_;
};

}  // namespace oaid

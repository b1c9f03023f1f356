#pragma once

// Reporting helpers for the acceptance binaries: one line per criterion.

#include <chrono>
#include <cstdio>
#include <exception>
#include <functional>
#include <string>

namespace dcr::acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Reporter {
 public:
  // Runs one criterion, prints "PASS|FAIL <name> (<seconds>s): <detail>".
  void check(const std::string& name, const std::function<Outcome()>& fn,
             double budget_seconds = 0.0) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (budget_seconds > 0.0 && secs > budget_seconds) {
      o.pass = false;
      o.detail += " [over the " + std::to_string(static_cast<int>(budget_seconds)) + "s budget]";
    }
    std::printf("%s %s (%.1fs): %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
    failures_ += o.pass ? 0 : 1;
  }

  int exit_code() const { return failures_ == 0 ? 0 : 1; }

 private:
  int failures_ = 0;
};

}  // namespace dcr::acceptance

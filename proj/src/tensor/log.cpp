#include "stclip/log.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <set>
#include <string>

namespace stclip {

namespace {

bool quiet() {
  static const bool q = std::getenv("STCLIP_QUIET") != nullptr;
  return q;
}

}  // namespace

void log_note(std::string_view message) {
  if (!quiet()) std::cerr << "note: " << message << '\n';
}

void log_note_once(std::string_view message) {
  static std::mutex mu;
  static std::set<std::string, std::less<>> seen;
  std::lock_guard lock(mu);
  if (seen.count(message)) return;
  seen.emplace(message);
  log_note(message);
}

}  // namespace stclip

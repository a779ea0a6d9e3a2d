#pragma once

#include <string_view>

namespace stclip {

// Informational notes go to stderr unless STCLIP_QUIET is set.
void log_note(std::string_view message);
// Same, but each distinct message is printed at most once per process.
void log_note_once(std::string_view message);

}  // namespace stclip

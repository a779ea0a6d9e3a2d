#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

// Command-line surface: pretrain, synth, splits, train, eval, introspect.
namespace stclip::cli {

// Parses and runs one command. Returns 0 on success and 1 on any error, in
// which case a single line "ERR <code>: <message>" goes to `err`.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

// Git's object id for a blob: SHA-1 over "blob <size>\0" followed by the
// bytes, as 40 lowercase hex digits.
std::string git_blob_sha1(std::span<const unsigned char> bytes);
std::string git_blob_sha1_file(const std::filesystem::path& path);

}  // namespace stclip::cli

#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>

namespace ehrgpt {

/// Writes through `fill` into a sibling temp file, then renames over `path`.
/// Parent directories are created. Throws DataError on I/O failure.
void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& fill,
                  bool binary = false);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Whole file as bytes. Throws DataError when unreadable.
std::string read_file(const std::filesystem::path& path);

}  // namespace ehrgpt

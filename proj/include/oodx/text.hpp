#pragma once

// Small text helpers shared by the file formats: number formatting, key-value
// manifests and content fingerprints.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace oodx {

/// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::string trim(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

/// `key = value` lines grouped under optional `[section]` headers; `#` starts a comment.
/// Keys may repeat; order is preserved.
struct KeyValueFile {
    struct Entry {
        std::string section;
        std::string key;
        std::string value;
        int line = 0;
    };
    std::vector<Entry> entries;

    static KeyValueFile parse(std::string_view text);
    static KeyValueFile read(const std::filesystem::path& path);

    void set(std::string key, std::string value, std::string section = {});
    std::optional<std::string> find(std::string_view key, std::string_view section = {}) const;
    /// Throws FormatError when the key is missing.
    std::string get(std::string_view key, std::string_view section = {}) const;
    std::vector<std::string> all(std::string_view key, std::string_view section = {}) const;

    std::string str() const;
    void write(const std::filesystem::path& path) const;
};

std::string read_file(const std::filesystem::path& path);
/// Writes with LF line endings exactly as given.
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace oodx

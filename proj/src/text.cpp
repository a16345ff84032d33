#include "oodx/text.hpp"

#include "oodx/error.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

namespace oodx {

std::string format_double(double value) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
    if (ec != std::errc{}) throw InputError("cannot format number");
    return std::string(buf, end);
}

double parse_double(std::string_view text) {
    const std::string t = trim(text);
    double value = 0.0;
    auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
    if (ec != std::errc{} || end != t.data() + t.size() || t.empty())
        throw FormatError("not a number: '" + t + "'");
    return value;
}

long long parse_int(std::string_view text) {
    const std::string t = trim(text);
    long long value = 0;
    auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
    if (ec != std::errc{} || end != t.data() + t.size() || t.empty())
        throw FormatError("not an integer: '" + t + "'");
    return value;
}

std::string trim(std::string_view text) {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = text.find_last_not_of(" \t\r\n");
    return std::string(text.substr(first, last - first + 1));
}

std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        out.emplace_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a(std::string_view text, std::uint64_t seed) {
    return fnv1a(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()), seed);
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

KeyValueFile KeyValueFile::parse(std::string_view text) {
    KeyValueFile kv;
    std::string section;
    int line_no = 0;
    for (const std::string& raw : split(text, '\n')) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw FormatError("line " + std::to_string(line_no) + ": unterminated section");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
        kv.entries.push_back({section, trim(std::string_view(line).substr(0, eq)),
                              trim(std::string_view(line).substr(eq + 1)), line_no});
    }
    return kv;
}

KeyValueFile KeyValueFile::read(const std::filesystem::path& path) { return parse(read_file(path)); }

void KeyValueFile::set(std::string key, std::string value, std::string section) {
    entries.push_back({std::move(section), std::move(key), std::move(value), 0});
}

std::optional<std::string> KeyValueFile::find(std::string_view key, std::string_view section) const {
    for (const auto& e : entries)
        if (e.key == key && e.section == section) return e.value;
    return std::nullopt;
}

std::string KeyValueFile::get(std::string_view key, std::string_view section) const {
    if (auto v = find(key, section)) return *v;
    std::string where = section.empty() ? "" : " in section [" + std::string(section) + "]";
    throw FormatError("missing key '" + std::string(key) + "'" + where);
}

std::vector<std::string> KeyValueFile::all(std::string_view key, std::string_view section) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
        if (e.key == key && e.section == section) out.push_back(e.value);
    return out;
}

std::string KeyValueFile::str() const {
    std::ostringstream os;
    std::string section;
    for (const auto& e : entries) {
        if (e.section != section) {
            section = e.section;
            os << '[' << section << "]\n";
        }
        os << e.key << " = " << e.value << '\n';
    }
    return os.str();
}

void KeyValueFile::write(const std::filesystem::path& path) const { write_file(path, str()); }

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("write failed for '" + path.string() + "'");
}

}  // namespace oodx

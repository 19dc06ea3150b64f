#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "langneck/common.hpp"

namespace langneck {

// Little-endian buffer writer for the artifact's binary formats.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void bytes(const void* p, std::size_t len) { raw(p, len); }
    void str(const std::string& s) {
        if (s.size() > 0xffff) throw ArgumentError("string too long for u16 length prefix");
        u16(static_cast<std::uint16_t>(s.size()));
        raw(s.data(), s.size());
    }

    const std::string& buffer() const { return buf_; }

private:
    void raw(const void* p, std::size_t len) {
        buf_.append(static_cast<const char*>(p), len);
    }
    std::string buf_;
};

// Reader with offset-carrying format errors.
class ByteReader {
public:
    explicit ByteReader(std::string buf) : buf_(std::move(buf)) {}

    std::uint8_t u8() { return read<std::uint8_t>(); }
    std::uint16_t u16() { return read<std::uint16_t>(); }
    std::uint32_t u32() { return read<std::uint32_t>(); }
    std::uint64_t u64() { return read<std::uint64_t>(); }
    float f32() { return read<float>(); }
    std::string str() {
        std::size_t len = u16();
        need(len);
        std::string s = buf_.substr(pos_, len);
        pos_ += len;
        return s;
    }
    void bytes(void* out, std::size_t len) {
        need(len);
        std::memcpy(out, buf_.data() + pos_, len);
        pos_ += len;
    }

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == buf_.size(); }

    void expect_magic(const char (&magic)[5], const char* what) {
        char got[4];
        bytes(got, 4);
        if (std::memcmp(got, magic, 4) != 0)
            throw FormatError(std::string(what) + ": bad magic at offset 0");
    }
    void expect_end(const char* what) {
        if (!at_end())
            throw FormatError(std::string(what) + ": trailing bytes at offset " + std::to_string(pos_));
    }

private:
    template <typename T>
    T read() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t len) {
        if (pos_ + len > buf_.size())
            throw FormatError("truncated file at offset " + std::to_string(pos_));
    }
    std::string buf_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    // a path that does not resolve is a caller mistake, not a bad artifact
    if (!in) throw ArgumentError("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::string& path, const std::string& data) {
    if (auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
        std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("I/O error: cannot write " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("I/O error: short write to " + path);
}

}  // namespace langneck

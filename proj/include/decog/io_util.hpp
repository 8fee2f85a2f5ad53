#ifndef DECOG_IO_UTIL_HPP
#define DECOG_IO_UTIL_HPP

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace decog::io {

// Little-endian append-only byte buffer for the binary model formats.
class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    void raw(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        bytes_.insert(bytes_.end(), c, c + n);
    }
    const std::string& bytes() const { return bytes_; }
    std::size_t size() const { return bytes_.size(); }

private:
    std::string bytes_;
};

// Bounds-checked little-endian reader; throws FormatError on truncation.
class ByteReader {
public:
    ByteReader(const char* data, std::size_t size, std::string what)
        : data_(data), size_(size), what_(std::move(what)) {}

    std::uint32_t u32();
    double f64();
    void raw(void* out, std::size_t n);
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }

private:
    void need(std::size_t n);
    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::uint32_t crc32(const void* data, std::size_t size);

std::string read_file(const std::string& path);

// Write-then-rename so a crash never leaves a truncated file in place.
void atomic_write_file(const std::string& path, const std::string& contents);

}  // namespace decog::io

#endif

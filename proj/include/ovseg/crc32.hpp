#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace ovseg {

// Reflected CRC-32 (poly 0xEDB88320), the ubiquitous zlib/PNG variant.
// Check vector: crc32("123456789") == 0xCBF43926.
class Crc32 {
public:
    void update(const void* bytes, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < len; ++i)
            state_ = table()[(state_ ^ p[i]) & 0xFF] ^ (state_ >> 8);
    }

    std::uint32_t value() const { return state_ ^ 0xFFFFFFFFu; }

    static std::uint32_t of(const void* bytes, std::size_t len) {
        Crc32 c;
        c.update(bytes, len);
        return c.value();
    }

private:
    static const std::array<std::uint32_t, 256>& table() {
        static const std::array<std::uint32_t, 256> t = [] {
            std::array<std::uint32_t, 256> out{};
            for (std::uint32_t i = 0; i < 256; ++i) {
                std::uint32_t c = i;
                for (int k = 0; k < 8; ++k)
                    c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
                out[i] = c;
            }
            return out;
        }();
        return t;
    }

    std::uint32_t state_ = 0xFFFFFFFFu;
};

}  // namespace ovseg

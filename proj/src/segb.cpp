#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ovseg/crc32.hpp"
#include "ovseg/errors.hpp"
#include "ovseg/synth_data.hpp"

// SEGB, little-endian throughout:
//   magic "SEGB" | version u32=1
//   vocab: u32 count, then per class u32 name length + UTF-8 bytes
//   u32 sample count
//   per sample: payload { u32 H, u32 W, image H*W*3 f32 (HWC),
//                         semantic H*W u16, instance H*W u16 }, then
//               u32 CRC32 of that payload

namespace ovseg {

namespace {

void put_u32(std::vector<char>& buf, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                 static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    buf.insert(buf.end(), b, b + 4);
}

void put_u16(std::vector<char>& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_f32(std::vector<char>& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) throw IoError("segb: cannot open " + path);
    }

    void bytes(void* dst, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw TruncatedFileError(std::string("segb: truncated while reading ") + what);
        crc_.update(dst, n);
    }

    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        bytes(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
    }

    std::uint16_t u16(const char* what) {
        unsigned char b[2];
        bytes(b, 2, what);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }

    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    void begin_crc() { crc_ = Crc32(); }
    std::uint32_t crc() const { return crc_.value(); }

private:
    std::ifstream in_;
    Crc32 crc_;
};

}  // namespace

void write_segb(const std::vector<SegmentationSample>& samples, const Vocabulary& vocab,
                const std::string& path) {
    std::vector<char> buf;
    buf.insert(buf.end(), {'S', 'E', 'G', 'B'});
    put_u32(buf, 1);
    put_u32(buf, static_cast<std::uint32_t>(vocab.names.size()));
    for (const auto& name : vocab.names) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
    }
    put_u32(buf, static_cast<std::uint32_t>(samples.size()));
    for (const auto& s : samples) {
        std::vector<char> payload;
        payload.reserve(8 + s.image.size() * 4 + s.semantic.size() * 4);
        put_u32(payload, s.height);
        put_u32(payload, s.width);
        const std::size_t hw = static_cast<std::size_t>(s.height) * s.width;
        for (std::size_t p = 0; p < hw; ++p)  // CHW in memory -> HWC on disk
            for (std::size_t ch = 0; ch < 3; ++ch) put_f32(payload, s.image[ch * hw + p]);
        for (std::uint16_t v : s.semantic) put_u16(payload, v);
        for (std::uint16_t v : s.instance) put_u16(payload, v);
        buf.insert(buf.end(), payload.begin(), payload.end());
        put_u32(buf, Crc32::of(payload.data(), payload.size()));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("segb: cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("segb: short write to " + path);
}

SegbContent read_segb(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::memcmp(magic, "SEGB", 4) != 0)
        throw BadMagicError("segb: bad magic in " + path);
    const std::uint32_t version = r.u32("version");
    if (version != 1)
        throw BadVersionError("segb: unsupported version " + std::to_string(version));

    SegbContent content;
    const std::uint32_t n_classes = r.u32("class count");
    for (std::uint32_t i = 0; i < n_classes; ++i) {
        const std::uint32_t len = r.u32("class name length");
        std::string name(len, '\0');
        if (len) r.bytes(name.data(), len, "class name");
        content.vocab.names.push_back(std::move(name));
        content.vocab.recipes.push_back({});
    }
    content.vocab.train_ids.resize(n_classes);
    content.vocab.test_ids.resize(n_classes);
    for (std::uint32_t i = 0; i < n_classes; ++i)
        content.vocab.train_ids[i] = content.vocab.test_ids[i] = i;

    const std::uint32_t n_samples = r.u32("sample count");
    for (std::uint32_t i = 0; i < n_samples; ++i) {
        r.begin_crc();
        SegmentationSample s;
        s.height = r.u32("sample height");
        s.width = r.u32("sample width");
        const std::size_t hw = static_cast<std::size_t>(s.height) * s.width;
        s.image.resize(3 * hw);
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < 3; ++ch) s.image[ch * hw + p] = r.f32("image");
        s.semantic.resize(hw);
        for (auto& v : s.semantic) v = r.u16("semantic map");
        s.instance.resize(hw);
        for (auto& v : s.instance) v = r.u16("instance map");
        const std::uint32_t want = r.crc();
        const std::uint32_t got = r.u32("sample checksum");
        if (got != want)
            throw ChecksumError("segb: checksum mismatch in sample " + std::to_string(i));
        content.samples.push_back(std::move(s));
    }
    return content;
}

}  // namespace ovseg

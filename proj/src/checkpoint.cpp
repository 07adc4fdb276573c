#include "ovseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ovseg/crc32.hpp"
#include "ovseg/errors.hpp"

// CKPT, little-endian throughout:
//   magic "CKPT" | version u32=1 | u32 tensor count
//   per tensor: u32 name length, UTF-8 name, u32 ndim, dims as u32s,
//               f32 data
//   u32 config byte length, UTF-8 config snapshot
//   u32 CRC32 of every preceding byte

namespace ovseg {

namespace {

constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    buf.push_back(static_cast<std::uint8_t>(v & 0xFF));
    buf.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    buf.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    buf.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

void put_f32(std::vector<std::uint8_t>& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

class ByteReader {
  public:
    explicit ByteReader(std::vector<std::uint8_t> data) : data_(std::move(data)) {}

    void bytes(void* dst, std::size_t n, const char* what) {
        if (pos_ + n > data_.size())
            throw TruncatedFileError(std::string("ckpt: truncated while reading ") + what);
        std::memcpy(dst, data_.data() + pos_, n);
        pos_ += n;
    }

    std::uint32_t u32(const char* what) {
        std::uint8_t b[4];
        bytes(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
    }

    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    // guard before allocating buffers sized by untrusted lengths
    void require(std::size_t n, const char* what) const {
        if (pos_ + n > data_.size())
            throw TruncatedFileError(std::string("ckpt: truncated while reading ") + what);
    }

    std::string str(std::size_t n, const char* what) {
        require(n, what);
        std::string s(n, '\0');
        bytes(s.data(), n, what);
        return s;
    }

    std::size_t pos() const { return pos_; }
    const std::vector<std::uint8_t>& data() const { return data_; }

  private:
    std::vector<std::uint8_t> data_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), {'C', 'K', 'P', 'T'});
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        put_u32(buf, static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t i = 0; i < t.ndim(); ++i)
            put_u32(buf, static_cast<std::uint32_t>(t.extent(i)));
        for (float v : t.data()) put_f32(buf, v);
    }
    put_u32(buf, static_cast<std::uint32_t>(ckpt.config_text.size()));
    buf.insert(buf.end(), ckpt.config_text.begin(), ckpt.config_text.end());
    put_u32(buf, Crc32::of(buf.data(), buf.size()));
    return buf;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const auto buf = checkpoint_bytes(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("ckpt: cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("ckpt: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("ckpt: cannot open " + path);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    ByteReader r(std::move(raw));

    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::memcmp(magic, "CKPT", 4) != 0) throw BadMagicError("ckpt: bad magic in " + path);
    const std::uint32_t version = r.u32("version");
    if (version != kVersion)
        throw BadVersionError("ckpt: unsupported version " + std::to_string(version));

    Checkpoint ckpt;
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32("name length");
        std::string name = r.str(name_len, "name");
        const std::uint32_t ndim = r.u32("ndim");
        Shape shape(ndim);
        std::size_t total = 1;
        for (std::uint32_t k = 0; k < ndim; ++k) {
            shape[k] = r.u32("dims");
            total *= shape[k];
        }
        r.require(total * 4, "tensor data");
        std::vector<float> data(total);
        for (std::size_t k = 0; k < total; ++k) data[k] = r.f32("tensor data");
        ckpt.add(name, Tensor<float>::from(shape, data, false));
    }
    const std::uint32_t cfg_len = r.u32("config length");
    ckpt.config_text = r.str(cfg_len, "config snapshot");

    const std::size_t body_end = r.pos();
    const std::uint32_t stored = r.u32("checksum");
    const std::uint32_t actual = Crc32::of(r.data().data(), body_end);
    if (stored != actual) throw ChecksumError("ckpt: checksum mismatch in " + path);
    return ckpt;
}

}  // namespace ovseg

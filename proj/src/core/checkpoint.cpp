#include "checkpoint.h"

#include <array>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("checkpoint: " + msg);
}

std::uint32_t crc_table_entry(std::uint32_t i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    return c;
}

const std::array<std::uint32_t, 256>& crc_table() {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) t[i] = crc_table_entry(i);
        return t;
    }();
    return table;
}

struct Writer {
    std::vector<unsigned char> bytes;

    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), c, c + n);
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u16(std::uint16_t v) {
        unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                              static_cast<unsigned char>(v >> 8)};
        raw(b, 2);
    }
    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
        raw(b, 4);
    }
    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
        raw(b, 8);
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
};

struct Reader {
    const unsigned char* data;
    std::size_t len;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) {
        if (pos + n > len) {
            fail(std::string("truncated file: expected ") + what + " at byte offset " +
                 std::to_string(pos) + " but only " + std::to_string(len) +
                 " bytes are present");
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return data[pos++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(data[pos]) |
                          static_cast<std::uint16_t>(data[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(data + pos), n);
        pos += n;
        return s;
    }
};

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '" + path + "'");
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) fail("failed reading '" + path + "'");
    return bytes;
}

std::vector<TensorRecord> parse_bundle(const std::vector<unsigned char>& bytes,
                                       const std::string& path, bool materialize) {
    Reader r{bytes.data(), bytes.size()};
    if (r.str(4, "magic") != "M2RP") fail("'" + path + "' has no M2RP magic");
    const std::uint32_t version = r.u32("format version");
    if (version != kBundleVersion) {
        fail("'" + path + "' has unsupported format version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32("record count");

    std::vector<TensorRecord> records;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("record name length");
        std::string name = r.str(name_len, "record name");
        if (!names.insert(name).second) fail("duplicate record name '" + name + "'");
        const std::uint8_t rank = r.u8("record rank");
        Shape shape;
        std::int64_t numel = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            const std::uint64_t ext = r.u64("record extent");
            if (ext == 0 || ext > (1ull << 32)) fail("record '" + name + "' has invalid extent");
            shape.push_back(static_cast<std::int64_t>(ext));
            numel *= static_cast<std::int64_t>(ext);
        }
        const std::uint8_t dtype = r.u8("dtype tag");
        if (dtype != 0) {
            fail("record '" + name + "' has unknown dtype tag " + std::to_string(dtype));
        }
        const std::size_t payload = static_cast<std::size_t>(numel) * 4;
        r.need(payload, "record payload");
        if (materialize) {
            std::vector<float> data(static_cast<std::size_t>(numel));
            std::memcpy(data.data(), bytes.data() + r.pos, payload);
            records.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(data))});
        }
        r.pos += payload;
    }

    const std::size_t crc_pos = r.pos;
    const std::uint32_t stored = r.u32("trailing CRC32");
    if (r.pos != bytes.size()) {
        fail("'" + path + "' has " + std::to_string(bytes.size() - r.pos) +
             " trailing bytes after the CRC at offset " + std::to_string(r.pos));
    }
    const std::uint32_t computed = crc32(bytes.data(), crc_pos);
    if (stored != computed) {
        fail("'" + path + "' failed CRC32 validation at byte offset " + std::to_string(crc_pos) +
             ": stored " + std::to_string(stored) + ", computed " + std::to_string(computed));
    }
    return records;
}

}  // namespace

std::uint32_t crc32(const unsigned char* data, std::size_t len) {
    const auto& table = crc_table();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) {
        c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    }
    return c ^ 0xFFFFFFFFu;
}

void write_bundle(const std::string& path, std::span<const TensorRecord> records) {
    Writer w;
    w.raw("M2RP", 4);
    w.u32(kBundleVersion);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& rec : records) {
        if (rec.name.size() > 0xFFFF) fail("record name too long: " + rec.name);
        w.u16(static_cast<std::uint16_t>(rec.name.size()));
        w.raw(rec.name.data(), rec.name.size());
        const auto& shape = rec.tensor.shape();
        w.u8(static_cast<std::uint8_t>(shape.size()));
        for (auto ext : shape) w.u64(static_cast<std::uint64_t>(ext));
        w.u8(0);  // f32
        auto vals = rec.tensor.values();
        for (float v : vals) w.f32(v);
    }
    w.u32(crc32(w.bytes.data(), w.bytes.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));
    if (!out) fail("failed writing '" + path + "'");
}

std::vector<TensorRecord> read_bundle(const std::string& path) {
    return parse_bundle(read_file(path), path, true);
}

void verify_bundle(const std::string& path) { parse_bundle(read_file(path), path, false); }

void write_tensor_file(const std::string& path, const std::string& name, const Tensor& tensor) {
    TensorRecord rec{name, tensor};
    write_bundle(path, std::span<const TensorRecord>(&rec, 1));
}

TensorRecord read_tensor_file(const std::string& path) {
    auto records = read_bundle(path);
    if (records.size() != 1) {
        fail("'" + path + "' holds " + std::to_string(records.size()) +
             " records, expected a single-record tensor file");
    }
    return std::move(records[0]);
}

}  // namespace m2repa

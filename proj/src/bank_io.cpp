#include "latentbank/bank_io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include <zlib.h>

namespace latentbank {

namespace {

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}
void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string path;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw IoError("truncated file: " + path);
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string out = buf.substr(pos, n);
        pos += n;
        return out;
    }
};

uint32_t payload_crc(const std::string& data, size_t from, size_t len) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data() + from),
                static_cast<uInt>(len));
    return static_cast<uint32_t>(crc);
}

void atomic_write(const std::string& path, const std::string& bytes) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        if (!out) throw IoError("cannot write file: " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename temp file onto " + path);
}

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return out;
}

void put_tensor_f32(std::string& out, const Tensor<float>& t) {
    put_u32(out, static_cast<uint32_t>(t.rows()));
    put_u32(out, static_cast<uint32_t>(t.cols()));
    for (float v : t.data()) put_f32(out, v);
}

Tensor<float> read_tensor_f32(Reader& r) {
    int rows = static_cast<int>(r.u32());
    int cols = static_cast<int>(r.u32());
    if (rows < 0 || cols < 0 || static_cast<uint64_t>(rows) * static_cast<uint64_t>(cols) > (1u << 28))
        throw IoError("implausible tensor extents in " + r.path);
    Tensor<float> t(rows, cols);
    for (auto& v : t.data()) v = r.f32();
    return t;
}

} // namespace

// ---------------------------------------------------------------------------
// bank file
// ---------------------------------------------------------------------------

void save_bank(const MemoryState<float>& state, int capacity_scale, const std::string& path) {
    std::string out;
    out += "LMB1";
    put_u16(out, kBankVersion);
    out.push_back(static_cast<char>(static_cast<uint8_t>(state.method)));
    out.push_back(static_cast<char>(static_cast<uint8_t>(capacity_scale)));
    put_u32(out, static_cast<uint32_t>(state.mem.rows()));
    put_u32(out, static_cast<uint32_t>(state.mem.cols()));
    put_u64(out, state.turn_counter);
    size_t payload_start = out.size();
    for (float v : state.mem.data()) put_f32(out, v);
    put_u32(out, payload_crc(out, payload_start, out.size() - payload_start));
    atomic_write(path, out);
}

LoadedBank load_bank(const std::string& path, std::optional<MethodId> expected_method) {
    std::string buf = read_all(path);
    Reader r{buf, 0, path};
    if (r.bytes(4) != "LMB1") throw IoError("bad magic in bank file: " + path);
    uint16_t version = r.u16();
    if (version != kBankVersion)
        throw IoError("unsupported bank version " + std::to_string(version) + " in " + path);
    uint8_t method_byte = r.u8();
    if (method_byte > static_cast<uint8_t>(MethodId::M6_Slot))
        throw IoError("unknown method id in bank file: " + path);
    MethodId method = static_cast<MethodId>(method_byte);
    if (expected_method && method != *expected_method)
        throw IoError("bank file holds " + method_name(method) + " state, expected " +
                      method_name(*expected_method) + ": " + path);
    LoadedBank out;
    out.capacity_scale = r.u8();
    uint32_t rows = r.u32();
    uint32_t cols = r.u32();
    uint64_t turns = r.u64();
    size_t payload_start = r.pos;
    size_t payload_len = static_cast<size_t>(rows) * cols * 4;
    r.need(payload_len + 4);
    uint32_t expect_crc = 0;
    {
        size_t crc_pos = payload_start + payload_len;
        for (int i = 0; i < 4; ++i)
            expect_crc |= static_cast<uint32_t>(static_cast<uint8_t>(buf[crc_pos + i])) << (8 * i);
    }
    if (payload_crc(buf, payload_start, payload_len) != expect_crc)
        throw IoError("bank payload CRC mismatch: " + path);
    if (payload_start + payload_len + 4 != buf.size())
        throw IoError("trailing bytes in bank file: " + path);

    Tensor<float> mem(static_cast<int>(rows), static_cast<int>(cols));
    for (auto& v : mem.data()) v = r.f32();
    if (!mem.all_finite()) throw IoError("non-finite payload in bank file: " + path);
    out.state.method = method;
    out.state.kind = state_kind(method);
    out.state.mem = std::move(mem);
    out.state.turn_counter = turns;
    return out;
}

// ---------------------------------------------------------------------------
// params file
// ---------------------------------------------------------------------------

void save_params(const AdapterParams<float>& params, const BackboneConfig& backbone,
                 const std::string& path) {
    std::string out;
    out += "LMP1";
    size_t body_start = out.size() + 4; // crc slot reserved right after magic
    std::string body;
    put_u16(body, kParamsVersion);
    body.push_back(static_cast<char>(static_cast<uint8_t>(params.method)));
    body.push_back(static_cast<char>(static_cast<uint8_t>(params.hyper.capacity_scale)));
    put_u32(body, static_cast<uint32_t>(params.hyper.n_p));
    put_u32(body, static_cast<uint32_t>(params.hyper.d_h));
    put_u32(body, static_cast<uint32_t>(params.hyper.slots));
    put_u32(body, static_cast<uint32_t>(params.hyper.top_k));
    put_u32(body, static_cast<uint32_t>(params.hyper.prefix_m));
    put_f64(body, params.hyper.gamma);
    put_f64(body, params.hyper.gate_bias_init);
    put_u32(body, static_cast<uint32_t>(backbone.vocab_size));
    put_u32(body, static_cast<uint32_t>(backbone.d));
    put_u32(body, static_cast<uint32_t>(backbone.n_layers_enc));
    put_u32(body, static_cast<uint32_t>(backbone.n_layers_dec));
    put_u32(body, static_cast<uint32_t>(backbone.n_heads));
    put_u32(body, static_cast<uint32_t>(backbone.max_len));
    put_u64(body, backbone.seed);
    auto put_group = [&body](const std::vector<NamedParam<float>>& group) {
        put_u32(body, static_cast<uint32_t>(group.size()));
        for (const auto& p : group) {
            put_u16(body, static_cast<uint16_t>(p.name.size()));
            body += p.name;
            put_tensor_f32(body, p.value);
        }
    };
    put_group(params.trainable);
    put_group(params.frozen);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
    put_u32(out, static_cast<uint32_t>(crc));
    out += body;
    (void)body_start;
    atomic_write(path, out);
}

LoadedParams load_params(const std::string& path, std::optional<MethodId> expected_method) {
    std::string buf = read_all(path);
    Reader r{buf, 0, path};
    if (r.bytes(4) != "LMP1") throw IoError("bad magic in params file: " + path);
    uint32_t expect_crc = r.u32();
    {
        uLong crc = crc32(0L, Z_NULL, 0);
        crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data() + r.pos),
                    static_cast<uInt>(buf.size() - r.pos));
        if (static_cast<uint32_t>(crc) != expect_crc)
            throw IoError("params CRC mismatch: " + path);
    }
    uint16_t version = r.u16();
    if (version != kParamsVersion)
        throw IoError("unsupported params version " + std::to_string(version) + " in " + path);
    uint8_t method_byte = r.u8();
    if (method_byte > static_cast<uint8_t>(MethodId::M6_Slot))
        throw IoError("unknown method id in params file: " + path);
    LoadedParams out;
    out.params.method = static_cast<MethodId>(method_byte);
    if (expected_method && out.params.method != *expected_method)
        throw IoError("params file holds " + method_name(out.params.method) +
                      ", expected " + method_name(*expected_method) + ": " + path);
    out.params.hyper.capacity_scale = r.u8();
    out.params.hyper.n_p = static_cast<int>(r.u32());
    out.params.hyper.d_h = static_cast<int>(r.u32());
    out.params.hyper.slots = static_cast<int>(r.u32());
    out.params.hyper.top_k = static_cast<int>(r.u32());
    out.params.hyper.prefix_m = static_cast<int>(r.u32());
    out.params.hyper.gamma = r.f64();
    out.params.hyper.gate_bias_init = r.f64();
    out.backbone.vocab_size = static_cast<int>(r.u32());
    out.backbone.d = static_cast<int>(r.u32());
    out.backbone.n_layers_enc = static_cast<int>(r.u32());
    out.backbone.n_layers_dec = static_cast<int>(r.u32());
    out.backbone.n_heads = static_cast<int>(r.u32());
    out.backbone.max_len = static_cast<int>(r.u32());
    out.backbone.seed = r.u64();
    auto read_group = [&r](std::vector<NamedParam<float>>& group) {
        uint32_t n = r.u32();
        for (uint32_t i = 0; i < n; ++i) {
            uint16_t name_len = r.u16();
            std::string name = r.bytes(name_len);
            group.push_back({std::move(name), read_tensor_f32(r)});
        }
    };
    read_group(out.params.trainable);
    read_group(out.params.frozen);
    if (r.pos != buf.size()) throw IoError("trailing bytes in params file: " + path);
    return out;
}

} // namespace latentbank

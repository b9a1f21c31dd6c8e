#include "jotr/archive.hpp"

#include <cstring>
#include <fstream>

namespace jotr {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(std::uint8_t(v & 0xff));
    out.push_back(std::uint8_t(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("archive: truncated file");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(buf[pos]) | (std::uint16_t(buf[pos + 1]) << 8);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    float f32() {
        std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

} // namespace

void Archive::add(const std::string& name, Dims dims, std::vector<float> data) {
    if (numel(dims) != data.size())
        throw ShapeError("archive: entry '" + name + "' dims " + dims_str(dims) +
                         " do not match payload of " + std::to_string(data.size()));
    if (name.size() > 0xffff) throw IoError("archive: entry name too long");
    if (contains(name)) throw IoError("archive: duplicate entry '" + name + "'");
    entries_.push_back({name, std::move(dims), std::move(data)});
}

void Archive::add(const std::string& name, const Tensor<float>& t) {
    add(name, t.dims(), t.values());
}

void Archive::add(const std::string& name, const Tensor<double>& t) {
    std::vector<float> data(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) data[i] = float(t.values()[i]);
    add(name, t.dims(), std::move(data));
}

bool Archive::contains(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

const Archive::Entry& Archive::at(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e;
    throw IoError("archive: missing entry '" + name + "'");
}

Tensor<float> Archive::tensor_f32(const std::string& name) const {
    const Entry& e = at(name);
    return Tensor<float>::from(e.dims, e.data);
}

Tensor<double> Archive::tensor_f64(const std::string& name) const {
    const Entry& e = at(name);
    std::vector<double> d(e.data.begin(), e.data.end());
    return Tensor<double>::from(e.dims, std::move(d));
}

std::vector<std::uint8_t> Archive::to_bytes() const {
    std::vector<std::uint8_t> out;
    out.push_back('J');
    out.push_back('T');
    out.push_back('R');
    out.push_back('K');
    put_u32(out, kVersion);
    put_u32(out, std::uint32_t(entries_.size()));
    for (const auto& e : entries_) {
        put_u16(out, std::uint16_t(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(0); // dtype: f32
        out.push_back(std::uint8_t(e.dims.size()));
        for (auto d : e.dims) put_u64(out, d);
        for (float f : e.data) put_f32(out, f);
    }
    return out;
}

Archive Archive::from_bytes(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes};
    if (r.str(4) != "JTRK") throw IoError("archive: bad magic bytes");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw IoError("archive: unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    Archive a;
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.str(r.u16());
        const std::uint8_t dtype = r.u8();
        if (dtype != 0) throw IoError("archive: unknown dtype tag " + std::to_string(dtype));
        const std::uint8_t rank = r.u8();
        e.dims.resize(rank);
        for (auto& d : e.dims) d = std::size_t(r.u64());
        const std::size_t n = numel(e.dims);
        e.data.resize(n);
        for (auto& f : e.data) f = r.f32();
        a.entries_.push_back(std::move(e));
    }
    if (r.pos != bytes.size()) throw IoError("archive: trailing bytes");
    return a;
}

void Archive::save(const std::string& path) const {
    const auto bytes = to_bytes();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("archive: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw IoError("archive: write failed for '" + path + "'");
}

Archive Archive::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("archive: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return from_bytes(bytes);
}

} // namespace jotr

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jotr/error.hpp"
#include "jotr/tensor.hpp"

namespace jotr {

// Named tensor archive. Layout, all little-endian:
//   "JTRK" | u32 version | u32 entry count
//   per entry: u16 name length | name bytes | u8 dtype (0 = f32) | u8 rank
//              | rank x u64 dims | raw f32 payload
// Round-trips must be bit-exact; entry order is preserved.
class Archive {
public:
    static constexpr std::uint32_t kVersion = 1;

    struct Entry {
        std::string name;
        Dims dims;
        std::vector<float> data;
    };

    void add(const std::string& name, Dims dims, std::vector<float> data);
    void add(const std::string& name, const Tensor<float>& t);
    void add(const std::string& name, const Tensor<double>& t); // narrowed to f32

    bool contains(const std::string& name) const;
    const Entry& at(const std::string& name) const;
    const std::vector<Entry>& entries() const { return entries_; }

    Tensor<float> tensor_f32(const std::string& name) const;
    Tensor<double> tensor_f64(const std::string& name) const;

    std::vector<std::uint8_t> to_bytes() const;
    static Archive from_bytes(const std::vector<std::uint8_t>& bytes);

    void save(const std::string& path) const;
    static Archive load(const std::string& path);

private:
    std::vector<Entry> entries_;
};

} // namespace jotr

#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace elt {

// Self-contained SHA-256, used to fingerprint frozen parameter sets.
class Sha256 {
public:
    Sha256();
    void update(const void* data, std::size_t len);
    void update(std::span<const std::uint8_t> bytes) { update(bytes.data(), bytes.size()); }
    // Finalizes and returns the lowercase hex digest. The object is consumed.
    std::string hex_digest();

private:
    void process_block(const std::uint8_t* block);
    std::uint32_t state_[8];
    std::uint8_t buffer_[64];
    std::uint64_t total_len_ = 0;
    std::size_t buffer_len_ = 0;
};

std::string sha256_hex(const void* data, std::size_t len);

}  // namespace elt

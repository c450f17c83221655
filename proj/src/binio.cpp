#include "coc/binio.hpp"

namespace coc {

void write_container(const std::string& path, const char magic[8],
                     const std::vector<std::uint8_t>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path + " for writing");
  out.write(magic, 8);
  out.write(reinterpret_cast<const char*>(payload.data()),
            std::streamsize(payload.size()));
  const std::uint32_t crc = crc32(payload.data(), payload.size());
  out.write(reinterpret_cast<const char*>(&crc), 4);
  out.flush();
  if (!out) throw io_error("write to " + path + " failed");
}

std::vector<std::uint8_t> read_container(const std::string& path,
                                         const char magic[8]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw io_error(path + ": file too short");
  if (std::memcmp(bytes.data(), magic, 8) != 0)
    throw io_error(path + ": bad magic, not the expected container type");
  const std::size_t payload_len = bytes.size() - 12;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + 8 + payload_len, 4);
  const std::uint32_t actual = crc32(bytes.data() + 8, payload_len);
  if (stored != actual)
    throw io_error(path + ": checksum mismatch, refusing to parse");
  return std::vector<std::uint8_t>(bytes.begin() + 8,
                                   bytes.end() - 4);
}

}  // namespace coc

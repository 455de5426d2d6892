#pragma once

#include <cstddef>
#include <filesystem>
#include <span>

namespace knnqe::detail {

// Read-only mmap of a whole file. Empty files map to an empty span.
class MappedFile {
 public:
  explicit MappedFile(const std::filesystem::path& path);
  ~MappedFile();

  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  MappedFile(MappedFile&& other) noexcept;
  MappedFile& operator=(MappedFile&& other) noexcept;

  std::span<const char> bytes() const { return {data_, size_}; }
  std::size_t size() const { return size_; }

 private:
  const char* data_ = nullptr;
  std::size_t size_ = 0;
};

// Writes bytes to `path`, translating ENOSPC into DiskFull.
void write_file(const std::filesystem::path& path, std::span<const char> bytes);

}  // namespace knnqe::detail

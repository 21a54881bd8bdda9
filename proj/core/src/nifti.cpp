#include "triad/nifti.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "triad/error.hpp"

static_assert(std::endian::native == std::endian::little, "NIfTI I/O assumes a little-endian host");

namespace triad {
namespace {

// Byte offsets of the NIfTI-1 header fields we honour.
constexpr std::size_t kOffSizeofHdr = 0;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffDescrip = 148;
constexpr std::size_t kOffQformCode = 252;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffSrowX = 280;
constexpr std::size_t kOffMagic = 344;
constexpr const char* kDescripTag = "triad:";

template <typename T>
T get(const std::vector<char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

template <typename T>
void put(std::vector<char>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Header {
  std::array<int64_t, 4> dims{};  // x, y, z, t
  int ndim = 3;
  std::int16_t datatype = 0;
  Vec3 spacing{};
  Vec3 origin{};
  AxisCode orientation;
  std::size_t vox_offset = kNiftiVoxOffset;
  double slope = 1.0;
  double inter = 0.0;
  bool exact_scaling = false;
  bool separate_image = false;
};

std::size_t bytes_per_voxel(std::int16_t datatype) { return datatype == kNiftiFloat32 ? 4 : 2; }

Header parse_header(const std::vector<char>& buf, const std::filesystem::path& path) {
  if (buf.size() < kNiftiHeaderBytes) fail(ErrorKind::integrity, path.string() + ": file shorter than a NIfTI header");
  const auto sizeof_hdr = get<std::int32_t>(buf, kOffSizeofHdr);
  if (sizeof_hdr != 348) {
    if (__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)) == 348u) fail(ErrorKind::format, path.string() + ": big-endian NIfTI is not supported");
    fail(ErrorKind::format, path.string() + ": sizeof_hdr is not 348");
  }
  const char* magic = buf.data() + kOffMagic;
  Header h;
  if (std::memcmp(magic, "n+1\0", 4) == 0) {
    h.separate_image = false;
  } else if (std::memcmp(magic, "ni1\0", 4) == 0) {
    h.separate_image = true;
  } else {
    fail(ErrorKind::format, path.string() + ": bad NIfTI magic");
  }

  const auto dim0 = get<std::int16_t>(buf, kOffDim);
  if (dim0 != 3 && dim0 != 4) fail(ErrorKind::format, path.string() + ": dim[0] must be 3 or 4, got " + std::to_string(dim0));
  h.ndim = dim0;
  h.dims = {1, 1, 1, 1};
  for (int a = 0; a < dim0; ++a) {
    const auto d = get<std::int16_t>(buf, kOffDim + 2 * (a + 1));
    if (d < 1) fail(ErrorKind::corrupt_header, path.string() + ": non-positive dim[" + std::to_string(a + 1) + "]");
    h.dims[a] = d;
  }

  h.datatype = get<std::int16_t>(buf, kOffDatatype);
  if (h.datatype != kNiftiInt16 && h.datatype != kNiftiFloat32 && h.datatype != kNiftiUint16) {
    fail(ErrorKind::unsupported_dtype, path.string() + ": datatype code " + std::to_string(h.datatype) + " is not one of {4, 16, 512}");
  }
  const auto bitpix = get<std::int16_t>(buf, kOffBitpix);
  if (static_cast<std::size_t>(bitpix) != 8 * bytes_per_voxel(h.datatype)) fail(ErrorKind::corrupt_header, path.string() + ": bitpix disagrees with datatype");

  for (int a = 0; a < 3; ++a) {
    const auto p = get<float>(buf, kOffPixdim + 4 * (a + 1));
    if (!(p > 0.0f) || !std::isfinite(p)) fail(ErrorKind::corrupt_header, path.string() + ": non-positive pixdim[" + std::to_string(a + 1) + "]");
    h.spacing[a] = p;
  }

  const auto vox = get<float>(buf, kOffVoxOffset);
  if (!h.separate_image && vox < static_cast<float>(kNiftiVoxOffset)) fail(ErrorKind::corrupt_header, path.string() + ": vox_offset below 352");
  h.vox_offset = static_cast<std::size_t>(vox);

  h.slope = get<float>(buf, kOffSclSlope);
  h.inter = get<float>(buf, kOffSclInter);
  std::string descrip(buf.data() + kOffDescrip, strnlen(buf.data() + kOffDescrip, 80));
  if (descrip.rfind(kDescripTag, 0) == 0) {
    double o = 0.0;
    double s = 0.0;
    if (std::sscanf(descrip.c_str() + std::strlen(kDescripTag), "o=%la;s=%la", &o, &s) == 2) {
      h.inter = o;
      h.slope = s;
      h.exact_scaling = true;
    }
  }

  if (get<std::int16_t>(buf, kOffSformCode) <= 0) fail(ErrorKind::format, path.string() + ": sform is required (sform_code = 0)");
  std::array<std::array<double, 4>, 3> srow{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) srow[r][c] = get<float>(buf, kOffSrowX + 16 * r + 4 * c);
  }
  h.orientation = orientation_from_affine(srow);
  h.origin = {srow[0][3], srow[1][3], srow[2][3]};
  return h;
}

// Decodes one x-fastest frame into a row-major (axis 2 fastest) volume.
Volume decode_frame(const Header& h, const char* raw) {
  Volume v = Volume::zeros({h.dims[0], h.dims[1], h.dims[2]}, h.spacing, h.orientation);
  v.origin = h.origin;
  const bool u16 = h.datatype == kNiftiUint16;
  const bool scale = !u16 && h.slope != 0.0 && (h.slope != 1.0 || h.inter != 0.0);
  std::size_t n = 0;
  for (int64_t k = 0; k < h.dims[2]; ++k) {
    for (int64_t j = 0; j < h.dims[1]; ++j) {
      for (int64_t i = 0; i < h.dims[0]; ++i, ++n) {
        float x = 0.0f;
        switch (h.datatype) {
          case kNiftiUint16: { std::uint16_t u; std::memcpy(&u, raw + 2 * n, 2); x = u; break; }
          case kNiftiInt16: { std::int16_t s; std::memcpy(&s, raw + 2 * n, 2); x = s; break; }
          default: std::memcpy(&x, raw + 4 * n, 4); break;
        }
        if (scale) x = static_cast<float>(x * h.slope + h.inter);
        v.at(i, j, k) = x;
      }
    }
  }
  if (u16) {
    v.dtype = DType::u16;
    if (h.exact_scaling || h.slope != 0.0) {
      v.intensity_offset = h.inter;
      v.intensity_scale = h.slope;
    }
  }
  return v;
}

std::vector<Volume> read_frames(const std::filesystem::path& path, Header& h_out) {
  const auto buf = slurp(path);
  h_out = parse_header(buf, path);
  const Header& h = h_out;
  const std::size_t frame_bytes = static_cast<std::size_t>(h.dims[0] * h.dims[1] * h.dims[2]) * bytes_per_voxel(h.datatype);
  const std::size_t total = frame_bytes * static_cast<std::size_t>(h.dims[3]);

  std::vector<char> img_buf;
  const char* base = nullptr;
  if (h.separate_image) {
    auto img = path;
    img.replace_extension(".img");
    img_buf = slurp(img);
    if (img_buf.size() < h.vox_offset + total) fail(ErrorKind::integrity, img.string() + ": image data truncated");
    base = img_buf.data() + h.vox_offset;
  } else {
    if (buf.size() < h.vox_offset + total) fail(ErrorKind::integrity, path.string() + ": image data truncated");
    base = buf.data() + h.vox_offset;
  }
  std::vector<Volume> frames;
  for (int64_t t = 0; t < h.dims[3]; ++t) frames.push_back(decode_frame(h, base + t * frame_bytes));
  return frames;
}

std::vector<char> encode_header(const Volume& first, int ndim, int64_t t) {
  std::vector<char> buf(kNiftiVoxOffset, 0);
  put<std::int32_t>(buf, kOffSizeofHdr, 348);
  put<std::int16_t>(buf, kOffDim, static_cast<std::int16_t>(ndim));
  for (int a = 0; a < 3; ++a) {
    if (first.shape[a] > 32767) fail(ErrorKind::geometry, "dimension exceeds NIfTI-1 int16 range");
    put<std::int16_t>(buf, kOffDim + 2 * (a + 1), static_cast<std::int16_t>(first.shape[a]));
  }
  put<std::int16_t>(buf, kOffDim + 8, static_cast<std::int16_t>(ndim == 4 ? t : 1));
  for (int a = 5; a < 8; ++a) put<std::int16_t>(buf, kOffDim + 2 * a, 1);

  const bool u16 = first.dtype == DType::u16;
  put<std::int16_t>(buf, kOffDatatype, u16 ? kNiftiUint16 : kNiftiFloat32);
  put<std::int16_t>(buf, kOffBitpix, u16 ? 16 : 32);
  put<float>(buf, kOffPixdim, 1.0f);  // qfac
  for (int a = 0; a < 3; ++a) put<float>(buf, kOffPixdim + 4 * (a + 1), static_cast<float>(first.spacing[a]));
  for (int a = 4; a < 8; ++a) put<float>(buf, kOffPixdim + 4 * a, 1.0f);
  put<float>(buf, kOffVoxOffset, static_cast<float>(kNiftiVoxOffset));

  if (u16) {
    put<float>(buf, kOffSclSlope, static_cast<float>(first.intensity_scale));
    put<float>(buf, kOffSclInter, static_cast<float>(first.intensity_offset));
    char descrip[80] = {};
    std::snprintf(descrip, sizeof(descrip), "%so=%a;s=%a", kDescripTag, first.intensity_offset, first.intensity_scale);
    std::memcpy(buf.data() + kOffDescrip, descrip, sizeof(descrip));
  } else {
    put<float>(buf, kOffSclSlope, 1.0f);
    put<float>(buf, kOffSclInter, 0.0f);
  }
  buf[kOffXyztUnits] = static_cast<char>(2 | 8);  // mm, seconds
  put<std::int16_t>(buf, kOffQformCode, 0);
  put<std::int16_t>(buf, kOffSformCode, 1);
  for (int a = 0; a < 3; ++a) {
    const int row = first.orientation.world_axis(a);
    put<float>(buf, kOffSrowX + 16 * row + 4 * a, static_cast<float>(first.orientation.sign(a) * first.spacing[a]));
  }
  for (int r = 0; r < 3; ++r) put<float>(buf, kOffSrowX + 16 * r + 12, static_cast<float>(first.origin[r]));
  std::memcpy(buf.data() + kOffMagic, "n+1\0", 4);
  return buf;
}

void encode_frame(const Volume& v, std::vector<char>& out) {
  const bool u16 = v.dtype == DType::u16;
  for (int64_t k = 0; k < v.shape[2]; ++k) {
    for (int64_t j = 0; j < v.shape[1]; ++j) {
      for (int64_t i = 0; i < v.shape[0]; ++i) {
        const float x = v.at(i, j, k);
        if (u16) {
          const auto u = static_cast<std::uint16_t>(x);
          out.insert(out.end(), reinterpret_cast<const char*>(&u), reinterpret_cast<const char*>(&u) + 2);
        } else {
          out.insert(out.end(), reinterpret_cast<const char*>(&x), reinterpret_cast<const char*>(&x) + 4);
        }
      }
    }
  }
}

void spit(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "short write to " + path.string());
}

}  // namespace

AxisCode orientation_from_affine(const std::array<std::array<double, 4>, 3>& srow) {
  static constexpr std::array<std::array<char, 2>, 3> kLetters{{{'R', 'L'}, {'A', 'P'}, {'S', 'I'}}};
  std::string code;
  for (int c = 0; c < 3; ++c) {
    int best = 0;
    double norm2 = 0.0;
    for (int r = 0; r < 3; ++r) {
      norm2 += srow[r][c] * srow[r][c];
      if (std::abs(srow[r][c]) > std::abs(srow[best][c])) best = r;
    }
    if (norm2 <= 0.0) fail(ErrorKind::orientation, "sform column " + std::to_string(c) + " is zero");
    const double cosine = std::abs(srow[best][c]) / std::sqrt(norm2);
    if (cosine < std::sqrt(0.5) - 1e-12) fail(ErrorKind::orientation, "sform column " + std::to_string(c) + " is more than 45 degrees oblique");
    code += kLetters[best][srow[best][c] > 0 ? 0 : 1];
  }
  return AxisCode::parse(code);
}

Volume read_nifti(const std::filesystem::path& path) {
  Header h;
  auto frames = read_frames(path, h);
  if (h.ndim == 4 && frames.size() > 1) fail(ErrorKind::format, path.string() + " is 4D; use read_nifti_4d");
  return std::move(frames.front());
}

Volume4D read_nifti_4d(const std::filesystem::path& path) {
  Header h;
  Volume4D v{read_frames(path, h)};
  if (v.t() < 2) fail(ErrorKind::format, path.string() + " is not a 4D series");
  return v;
}

std::variant<Volume, Volume4D> read_nifti_any(const std::filesystem::path& path) {
  Header h;
  auto frames = read_frames(path, h);
  if (frames.size() > 1) return Volume4D{std::move(frames)};
  return std::move(frames.front());
}

void write_nifti(const Volume& vol, const std::filesystem::path& path) {
  vol.validate();
  auto bytes = encode_header(vol, 3, 1);
  bytes.reserve(bytes.size() + vol.data.size() * 4);
  encode_frame(vol, bytes);
  spit(path, bytes);
}

void write_nifti_4d(const Volume4D& vol, const std::filesystem::path& path) {
  vol.validate();
  auto bytes = encode_header(vol.frames.front(), 4, vol.t());
  for (const auto& f : vol.frames) encode_frame(f, bytes);
  spit(path, bytes);
}

}  // namespace triad

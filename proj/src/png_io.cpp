#include "semalign/png_io.hpp"

#include "semalign/errors.hpp"

#include <png.h>

#include <cstring>

namespace semalign {

RawImage read_png(const std::filesystem::path& path, int channels) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&image, path.c_str()) == 0)
        throw DataError("cannot read PNG " + path.string() + ": " + image.message);
    image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    RawImage out;
    out.width = static_cast<int>(image.width);
    out.height = static_cast<int>(image.height);
    out.channels = channels;
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr) == 0) {
        png_image_free(&image);
        throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
    }
    return out;
}

void write_png(const std::filesystem::path& path, const RawImage& raw) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(raw.width);
    image.height = static_cast<png_uint_32>(raw.height);
    image.format = raw.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (png_image_write_to_file(&image, path.c_str(), 0, raw.pixels.data(), 0, nullptr) == 0)
        throw DataError("cannot write PNG " + path.string() + ": " + image.message);
}

}  // namespace semalign

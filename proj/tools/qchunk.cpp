#include <iostream>
#include <memory>

#include "qchunk/cli.hpp"
#include "qchunk/httplib_transport.hpp"

int main(int argc, char** argv) {
  const qchunk::cli::Context ctx{
      std::cout, std::cerr, [](const qchunk::http::Config& c) {
        return std::make_shared<qchunk::http::HttplibTransport>(c.base_url, c.timeout_seconds);
      }};
  return qchunk::cli::run(argc, argv, ctx);
}

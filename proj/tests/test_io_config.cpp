#include <catch2/catch_amalgamated.hpp>

TEST_CASE("test_io_config placeholder") { SUCCEED(); }

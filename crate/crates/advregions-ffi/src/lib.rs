// C ABI surface; populated after the core library stabilizes.

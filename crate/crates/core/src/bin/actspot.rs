use actspot::alloc_stats::CountingAllocator;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

fn main() {
    std::process::exit(actspot::cli::run(std::env::args_os()));
}

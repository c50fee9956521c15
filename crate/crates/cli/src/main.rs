fn main() {
    println!("avdit");
}

fn main() { println!("thalseg"); }

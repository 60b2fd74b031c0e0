fn main() {
    println!("semiseg3d CLI placeholder");
}

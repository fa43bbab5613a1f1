//! External scorer speaking the `argv = [image_path, prompt]` protocol; prints
//! the JPEG size of the image in kilobytes. Useful as a reference scorer.

use std::path::Path;

use texforce::image::Image;
use texforce::rewards::incompressibility;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 3 {
        eprintln!("usage: {} IMAGE PROMPT", args[0]);
        std::process::exit(2);
    }
    let score = Image::load_png(Path::new(&args[1])).and_then(|img| incompressibility(&img, 95));
    match score {
        Ok(v) => println!("{v:.12}"),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}

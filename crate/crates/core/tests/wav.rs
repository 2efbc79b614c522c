mod common;

use acfforge_core::backends::make_silent_wav;

#[test]
fn thirty_seconds_at_16k() {
    let wav = make_silent_wav(30.0, 16_000).unwrap();
    assert_eq!(wav.len(), 960_044);

    let (channels, rate, bits, data) = common::parse_wav(&wav).unwrap();
    assert_eq!((channels, rate, bits), (1, 16_000, 16));
    assert_eq!(data.len(), 960_000);
    assert!(data.iter().all(|b| *b == 0));

    let reader = hound::WavReader::new(std::io::Cursor::new(&wav)).unwrap();
    let spec = reader.spec();
    assert_eq!((spec.channels, spec.sample_rate, spec.bits_per_sample), (1, 16_000, 16));
    assert_eq!(reader.duration(), 480_000);
    assert!(reader.into_samples::<i16>().all(|s| s.unwrap() == 0));
}

#[test]
fn other_lengths_agree_between_readers() {
    for (secs, rate) in [(0.5, 8_000), (1.0, 44_100), (2.25, 22_050)] {
        let wav = make_silent_wav(secs, rate).unwrap();
        let (_, r, _, data) = common::parse_wav(&wav).unwrap();
        let reader = hound::WavReader::new(std::io::Cursor::new(&wav)).unwrap();
        assert_eq!(r, rate);
        assert_eq!(reader.duration() as usize * 2, data.len());
    }
}

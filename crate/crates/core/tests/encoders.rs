use alignlab::encoders::{
    build_template, parse_template, synth_modality_tokens, synth_payload, EncoderConfig, Modality, StudentEncoder, TeacherEncoders,
    TemplateParts, Token, TokenStream, Tokenizer,
};
use diffcore::{Tape, Tensor};
use proptest::prelude::*;

fn encoders() -> (TeacherEncoders, StudentEncoder) {
    let cfg = EncoderConfig::default();
    let teacher = TeacherEncoders::new(&cfg, 1);
    let student = StudentEncoder::new(&cfg, 2, &teacher);
    (teacher, student)
}

fn image_tokens(seed: u64) -> Vec<Token> {
    synth_modality_tokens(Modality::Image, &synth_payload(Modality::Image, seed).unwrap()).unwrap()
}

#[test]
fn teacher_is_deterministic_and_prompt_sensitive() {
    let (teacher, _) = encoders();
    let a = teacher.encode_text::<f64>(&["a red square on the left"]).unwrap();
    let b = teacher.encode_text::<f64>(&["a red square on the left"]).unwrap();
    assert_eq!(a, b);
    let c = teacher.encode_text::<f64>(&["a blue circle at the top"]).unwrap();
    assert_ne!(a.c, c.c);
    let cfg = EncoderConfig::default();
    assert_eq!(a.c.shape(), &[1, cfg.cond_len, cfg.d_c]);
    assert_eq!(a.c_p.shape(), &[1, cfg.d_p]);
}

#[test]
fn empty_prompt_is_finite() {
    let (teacher, _) = encoders();
    let e = teacher.encode_text::<f64>(&[""]).unwrap();
    assert!(e.c.data().iter().chain(e.c_p.data()).all(|v| v.is_finite()));
}

#[test]
fn teacher_rejects_continuous_tokens() {
    let (teacher, _) = encoders();
    let stream = TokenStream { tokens: image_tokens(0) };
    assert!(teacher.encode::<f64>(&[stream]).is_err());
}

#[test]
fn teacher_weights_never_receive_gradients() {
    let (teacher, _) = encoders();
    let stream = TokenStream::text(teacher.tokenizer(), "a green triangle");
    let mut tape = Tape::<f64>::new();
    let (bound, c, c_p, _) = teacher.forward_on(&mut tape, &[stream]).unwrap();
    let a = tape.sum_all(c);
    let b = tape.sum_all(c_p);
    let loss = tape.add(a, b).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(bound.iter().count() > 0);
    for (name, v) in bound.iter() {
        assert!(grads.get(v).is_none(), "{name} received a gradient");
    }
}

#[test]
fn student_stack_covers_every_layer() {
    let (_, student) = encoders();
    let cfg = EncoderConfig::default();
    let stack = student.encode_text::<f64>(&["a small yellow square", "two dots"], 16).unwrap();
    assert_eq!(stack.depth(), cfg.student_depth + 1);
    assert_eq!(stack.depth(), cfg.stack_depth());
    assert_eq!(stack.h.shape(), &[2, cfg.stack_depth(), 16, cfg.z]);
    assert_eq!(stack.mask.shape(), &[2, 16]);
}

#[test]
fn image_tokens_change_the_features() {
    let (_, student) = encoders();
    let tok = student.tokenizer();
    let patches = image_tokens(1);
    let mut mixed = TokenStream::text(tok, "describe the picture now");
    let mut text = mixed.clone();
    text.tokens.extend(std::iter::repeat_n(Token::Text(9), patches.len()));
    mixed.tokens.extend(patches);
    assert_eq!(text.len(), mixed.len());
    let a = student.encode::<f64>(&[text], 0).unwrap();
    let b = student.encode::<f64>(&[mixed], 0).unwrap();
    assert_ne!(a.h, b.h);
}

#[test]
fn swapping_patches_swaps_embedding_rows() {
    let (_, student) = encoders();
    let tok = student.tokenizer();
    let patches = image_tokens(2);
    let mut a = TokenStream::text(tok, "look");
    a.tokens.extend(patches.iter().cloned());
    let mut b = a.clone();
    let (i, j) = (a.len() - 4, a.len() - 1);
    b.tokens.swap(i, j);
    let (ha, hb) = (student.encode::<f64>(&[a], 0).unwrap(), student.encode::<f64>(&[b], 0).unwrap());
    let layer0 = |h: &Tensor<f64>, pos: usize| h.index0(0).index0(0).index0(pos);
    assert_eq!(layer0(&ha.h, i), layer0(&hb.h, j));
    assert_eq!(layer0(&ha.h, j), layer0(&hb.h, i));
}

#[test]
fn every_modality_lands_in_the_shared_width() {
    let (_, student) = encoders();
    let cfg = EncoderConfig::default();
    for kind in [Modality::Image, Modality::Video, Modality::Audio] {
        let tokens = synth_modality_tokens(kind, &synth_payload(kind, 5).unwrap()).unwrap();
        let stack = student.encode::<f64>(&[TokenStream { tokens }], 0).unwrap();
        assert_eq!(stack.width(), cfg.z);
        assert!(stack.h.data().iter().all(|v| v.is_finite()), "{kind:?}");
    }
}

#[test]
fn oversize_stream_is_rejected() {
    let (_, student) = encoders();
    let cfg = EncoderConfig::default();
    let stream = TokenStream {
        tokens: vec![Token::Text(7); cfg.max_seq + 1],
    };
    assert!(student.encode::<f64>(&[stream], 0).is_err());
}

#[test]
fn text_only_template_has_no_slots_filled() {
    let tok = Tokenizer::new(512);
    let parts = TemplateParts {
        text_prompt: "a red cat".into(),
        ..Default::default()
    };
    let t = build_template(&parts, &tok).unwrap();
    assert!(t.text.contains("\"image prompt\":\"no\""));
    assert!(t.stream.is_text_only());
    assert_eq!(parse_template(&t.text).unwrap(), parts.fields());
}

#[test]
fn image_template_splices_patches() {
    let tok = Tokenizer::new(512);
    let parts = TemplateParts {
        text_prompt: "make it blue".into(),
        editing_prompt: "recolor".into(),
        image: Some(image_tokens(3)),
        ..Default::default()
    };
    let t = build_template(&parts, &tok).unwrap();
    assert!(t.text.contains("\"image prompt\":\"yes\""));
    let patches = t.stream.tokens.iter().filter(|t| t.modality() == Modality::Image).count();
    assert_eq!(patches, 4);
    let fields = parse_template(&t.text).unwrap();
    assert_eq!(fields.image_prompt, "yes");
    assert_eq!(fields.video_prompt, "no");
}

#[test]
fn empty_template_is_rejected() {
    assert!(build_template(&TemplateParts::default(), &Tokenizer::new(512)).is_err());
}

proptest! {
    #[test]
    fn template_round_trips(text in ".{0,40}", edit in "[a-z ]{0,20}", image: bool, audio: bool) {
        prop_assume!(!text.is_empty() || !edit.is_empty() || image || audio);
        let parts = TemplateParts {
            text_prompt: text,
            editing_prompt: edit,
            image: image.then(|| image_tokens(4)),
            audio: audio.then(|| synth_modality_tokens(Modality::Audio, &synth_payload(Modality::Audio, 4).unwrap()).unwrap()),
            video: None,
        };
        let t = build_template(&parts, &Tokenizer::new(512)).unwrap();
        prop_assert_eq!(parse_template(&t.text).unwrap(), parts.fields());
    }

    #[test]
    fn tokenizer_is_stable(text in ".{0,60}") {
        let (a, b) = (Tokenizer::new(512), Tokenizer::new(512));
        let ids = a.encode(&text);
        prop_assert_eq!(&ids, &b.encode(&text));
        prop_assert!(ids.iter().all(|&i| (1..512).contains(&i)));
    }
}

use vitp::{bias_matrix, image_tensor, resolve_config, schedule_sides};

#[test]
fn schedules_by_mode_name() {
    assert_eq!(schedule_sides("W", 2, 4, 4).unwrap(), vec![vec![3, 5, 5, 7]; 2]);
    assert_eq!(schedule_sides("dw", 1, 1, 2).unwrap(), vec![vec![3]]);
    assert!(schedule_sides("X", 1, 1, 4).is_err());
}

#[test]
fn direct_and_gathered_bias_agree() {
    for class_token in [false, true] {
        let a = bias_matrix(3, 3, -7.0, class_token, false).unwrap();
        let r = bias_matrix(3, 3, -7.0, class_token, true).unwrap();
        assert_eq!(a, r);
        assert_eq!(a.len(), 9 + usize::from(class_token));
    }
    assert!(bias_matrix(3, 7, -1.0, false, false).is_err());
    assert!(bias_matrix(3, 3, 1.0, false, false).is_err());
}

#[test]
fn image_buffers_must_hold_whole_images() {
    assert_eq!(
        image_tensor(vec![0.0; 2 * 3 * 4 * 4], 4).unwrap().shape(),
        &[2, 3, 4, 4]
    );
    assert!(image_tensor(vec![0.0; 47], 4).is_err());
    assert!(image_tensor(Vec::new(), 4).is_err());
}

#[test]
fn keyword_overrides_beat_config_text() {
    let flags = vec![("heads".to_string(), "4".to_string())];
    let cfg = resolve_config("heads = 2\nembed_dim = 32\n", &flags).unwrap();
    assert_eq!(cfg.model.heads, 4);
    assert!(resolve_config("bogus = 1\n", &[]).is_err());
}

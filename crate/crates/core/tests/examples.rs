//! Every capability example runs to completion.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }

        #[test]
        fn $name() {
            $name::run_example().expect(stringify!($name));
        }
    };
}

example!(vm_basics);
example!(extract_blocks);
example!(diversify);
example!(catalog);
example!(tcp_session);
example!(attestation);
example!(refresh_bench);

from ones.cli import main

raise SystemExit(main())

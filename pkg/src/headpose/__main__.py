from headpose.cli import main

raise SystemExit(main())

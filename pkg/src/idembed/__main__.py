from idembed.cli import main

main()
